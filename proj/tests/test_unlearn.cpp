#include <algorithm>
#include <set>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "quickdrop/unlearn.hpp"
#include "support.hpp"

using namespace quickdrop;

namespace {

std::uint64_t total_samples(const RequestOutcome<double>& out) {
  std::uint64_t n = 0;
  for (const auto& s : out.stages) n += s.samples;
  return n;
}

}  // namespace

class UnlearnTest : public ::testing::Test {
 protected:
  void SetUp() override {
    spec = qdtest::small_mlp(4);
    const auto data = synth_blobs(qdtest::blob_spec(4, 60), 3);
    part = dirichlet_partition(data, 4, 1.0, 7);
    clients = make_clients<double>(part.clients, 10, 1);
    params = init_params<double>(spec, {2});
    request.sga_lr = 0.05;
    request.recovery_lr = 0.05;
    request.mix_per_class = 2;
    request.pass_batch = 4;
    request.seed = 9;
  }

  UnlearningRequest with(std::vector<Target> targets) const {
    UnlearningRequest r = request;
    r.targets = std::move(targets);
    return r;
  }

  static Target cls(std::size_t c) { return {TargetKind::class_label, c}; }
  static Target client(std::size_t c) { return {TargetKind::client, c}; }

  ArchSpec spec;
  Partition part;
  std::vector<ClientState<double>> clients;
  ParamSet<double> params;
  UnlearningRequest request;
};

// Forget and recovery sets must split each client's retained synthetic rows
// exactly, with mix-ins drawn only from remaining classes of the client's own
// original data.
TEST_F(UnlearnTest, PartitionMatchesSetOracle) {
  UnlearnState state;
  state.forgotten_classes = {0};
  const auto fp = build_forget_partition(with({cls(2)}), clients, state);
  EXPECT_EQ(fp.forget_classes, (std::vector<int>{2}));
  ASSERT_EQ(fp.clients.size(), 4u);
  for (const auto& p : fp.clients) {
    const auto& c = clients[p.client];
    std::set<SampleRef> expected_forget, expected_recovery, got_forget, got_recovery;
    for (const auto& [label, bucket] : c.syn.buckets) {
      for (std::size_t i = 0; i < bucket.dim(0); ++i) {
        if (label == 2) expected_forget.insert({label, i, false});
        if (label != 2 && label != 0) expected_recovery.insert({label, i, false});
      }
    }
    std::size_t mix = 0;
    for (const auto& r : p.forget.refs) got_forget.insert(r);
    for (const auto& r : p.recovery.refs) {
      if (r.original) {
        ++mix;
        EXPECT_NE(r.label, 2);
        EXPECT_NE(r.label, 0);
        EXPECT_EQ(c.data.labels[r.index], r.label);
      } else {
        got_recovery.insert(r);
      }
    }
    EXPECT_EQ(got_forget, expected_forget);
    EXPECT_EQ(got_recovery, expected_recovery);
    EXPECT_EQ(mix, p.mix_count);
    std::size_t expected_mix = 0;
    const auto counts = c.data.class_counts();
    for (int label : p.remain_classes) expected_mix += std::min<std::size_t>(2, counts[label]);
    EXPECT_EQ(mix, expected_mix);
    EXPECT_EQ(p.original_forget, counts[2]);
    EXPECT_EQ(p.forget.size(), p.forget.refs.size());
    EXPECT_EQ(p.forget.pixels.size(), p.forget.size() * spec.input.size());
  }
}

TEST_F(UnlearnTest, OriginalSourceUsesRealRowsWithoutMixins) {
  const auto fp = build_forget_partition(with({cls(1)}), clients, {}, DataSource::original);
  for (const auto& p : fp.clients) {
    const auto counts = clients[p.client].data.class_counts();
    EXPECT_EQ(p.forget.size(), counts[1]);
    EXPECT_EQ(p.recovery.size(), clients[p.client].data.size() - counts[1]);
    EXPECT_EQ(p.mix_count, 0u);
  }
}

TEST_F(UnlearnTest, DepartingClientForgetsEverythingItHeld) {
  const auto fp = build_forget_partition(with({client(1)}), clients, {});
  const auto& p = fp.clients[1];
  EXPECT_TRUE(p.departing);
  EXPECT_EQ(p.forget.size(), clients[1].syn.total());
  EXPECT_TRUE(p.recovery.empty());
  EXPECT_EQ(fp.forget_classes, clients[1].syn.held_classes());
  for (std::size_t i : {0u, 2u, 3u}) EXPECT_TRUE(fp.clients[i].forget.empty());
}

TEST_F(UnlearnTest, InvalidTargetsAreRejected) {
  EXPECT_THROW(build_forget_partition(with({}), clients, {}), UnlearnError);
  EXPECT_THROW(build_forget_partition(with({cls(4)}), clients, {}), UnlearnError);
  EXPECT_THROW(build_forget_partition(with({client(4)}), clients, {}), UnlearnError);
}

TEST_F(UnlearnTest, ZeroRatesLeaveParametersBitwise) {
  auto r = with({cls(1)});
  r.sga_lr = 0.0;
  r.recovery_lr = 0.0;
  UnlearnState state;
  const auto out = execute_request(params, r, clients, spec, state);
  EXPECT_TRUE(out.params.bitwise_equal(params));
}

TEST_F(UnlearnTest, AscentIsDescentWithNegatedRate) {
  const auto fp = build_forget_partition(with({cls(1)}), clients, {});
  ForgetPartition<double> swapped = fp;
  for (auto& p : swapped.clients) {
    p.recovery = p.forget;
    p.departing = false;
  }
  const auto up = sga_round(params, fp, 0.05, spec, 4, 11);
  const auto down = recovery_round(params, swapped, -0.05, spec, 4, 11);
  EXPECT_TRUE(up.params.bitwise_equal(down.params));
  EXPECT_EQ(up.samples, down.samples);
}

TEST_F(UnlearnTest, AscentRaisesForgetLoss) {
  const auto fp = build_forget_partition(with({cls(1)}), clients, {});
  auto loss = [&](const ParamSet<double>& p) {
    double total = 0.0;
    for (const auto& c : fp.clients) {
      std::vector<std::size_t> rows(c.forget.size());
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      if (rows.empty()) continue;
      total += cross_entropy(forward(p, spec, c.forget.images(rows)), c.forget.labels).item();
    }
    return total;
  };
  EXPECT_GT(loss(sga_round(params, fp, 0.05, spec, 4, 1).params), loss(params));
}

TEST_F(UnlearnTest, SampleCountersAreExact) {
  auto r = with({cls(1), client(2)});
  r.unlearn_rounds = 2;
  r.recovery_rounds = 3;
  UnlearnState state;
  const auto fp = build_forget_partition(r, clients, state);
  const auto out = execute_request(params, r, clients, spec, state);
  ASSERT_EQ(out.stages.size(), 2u);
  EXPECT_EQ(out.stages[0].samples, 2 * fp.forget_total());
  std::size_t staying = 0;
  for (const auto& p : fp.clients) staying += p.departing ? 0 : p.recovery.size();
  EXPECT_EQ(out.stages[1].samples, 3 * staying);
  EXPECT_EQ(out.stages[0].rounds, 2u);
  EXPECT_EQ(out.stages[1].rounds, 3u);
}

TEST_F(UnlearnTest, SgaWeightingChoices) {
  auto fp = build_forget_partition(with({cls(1)}), clients, {});
  const auto a = sga_round(params, fp, 0.05, spec, 4, 1, SgaWeighting::synthetic);
  const auto b = sga_round(params, fp, 0.05, spec, 4, 1, SgaWeighting::original);
  EXPECT_EQ(a.samples, b.samples);
  std::size_t active = 0;
  for (const auto& p : fp.clients) active += !p.forget.empty();
  if (active > 1) EXPECT_FALSE(a.params.bitwise_equal(b.params));
}

TEST_F(UnlearnTest, ZeroRoundsOnlyUpdateState) {
  auto r = with({cls(3)});
  r.unlearn_rounds = 0;
  r.recovery_rounds = 0;
  UnlearnState state;
  const auto out = execute_request(params, r, clients, spec, state);
  EXPECT_TRUE(out.params.bitwise_equal(params));
  EXPECT_EQ(total_samples(out), 0u);
  EXPECT_TRUE(state.covers(cls(3)));
}

TEST_F(UnlearnTest, SequenceSkipsRepeatedTargetsWithWarning) {
  UnlearnState state;
  const auto out = execute_sequence(params, {with({cls(1)}), with({cls(1)}), with({cls(1), cls(2)})},
                                    clients, spec, state);
  EXPECT_EQ(out.stages.size(), 4u);
  EXPECT_EQ(state.warnings.size(), 2u);
  EXPECT_EQ(out.stages[2].label, "class=2");
  EXPECT_EQ(state.forgotten_classes, (std::set<int>{1, 2}));
}

TEST_F(UnlearnTest, LaterRequestsExcludeForgottenClasses) {
  UnlearnState state;
  execute_request(params, with({cls(1)}), clients, spec, state);
  const auto fp = build_forget_partition(with({cls(2)}), clients, state);
  for (const auto& p : fp.clients) {
    for (const auto& r : p.recovery.refs) EXPECT_NE(r.label, 1);
    for (const auto& r : p.forget.refs) EXPECT_EQ(r.label, 2);
  }
}

TEST_F(UnlearnTest, EmptySequenceIsIdentity) {
  UnlearnState state;
  const auto out = execute_sequence<double>(params, {}, clients, spec, state);
  EXPECT_TRUE(out.params.bitwise_equal(params));
  EXPECT_TRUE(out.stages.empty());
}

TEST_F(UnlearnTest, BatchOfOneEqualsSingleRequest) {
  UnlearnState s1, s2;
  const auto a = execute_batch(params, {with({cls(1)})}, clients, spec, s1);
  const auto b = execute_request(params, with({cls(1)}), clients, spec, s2);
  EXPECT_TRUE(a.params.bitwise_equal(b.params));
  EXPECT_EQ(total_samples(a), total_samples(b));
}

TEST_F(UnlearnTest, BatchCostsLessThanSequence) {
  UnlearnState s1, s2;
  const auto batch = execute_batch(params, {with({cls(1)}), with({cls(2)})}, clients, spec, s1);
  const auto seq = execute_sequence(params, {with({cls(1)}), with({cls(2)})}, clients, spec, s2);
  EXPECT_LT(total_samples(batch), total_samples(seq));
  EXPECT_EQ(s1.forgotten_classes, s2.forgotten_classes);
  EXPECT_EQ(batch.stages.size(), 2u);
  EXPECT_EQ(batch.stages[0].forget_classes, (std::vector<int>{1, 2}));
}

TEST_F(UnlearnTest, ThreadsDoNotChangeResult) {
  auto r = with({cls(1)});
  UnlearnState s1, s2;
  const auto a = execute_request(params, r, clients, spec, s1);
  r.threads = 3;
  const auto b = execute_request(params, r, clients, spec, s2);
  EXPECT_TRUE(a.params.bitwise_equal(b.params));
}

TEST_F(UnlearnTest, RelearnZeroRoundsRestoresStateOnly) {
  UnlearnState state;
  const auto u = execute_request(params, with({cls(1)}), clients, spec, state);
  const auto out = relearn(u.params, {cls(1)}, 0, clients, spec, state, request);
  EXPECT_TRUE(out.params.bitwise_equal(u.params));
  EXPECT_FALSE(state.covers(cls(1)));
  ASSERT_EQ(out.stages.size(), 1u);
  EXPECT_EQ(out.stages[0].stage, Stage::relearn);
  EXPECT_EQ(out.stages[0].samples, 0u);
}

TEST_F(UnlearnTest, RelearnUsesAllRetainedBuckets) {
  UnlearnState state;
  execute_request(params, with({cls(1)}), clients, spec, state);
  execute_request(params, with({cls(2)}), clients, spec, state);
  const auto out = relearn(params, {cls(1)}, 2, clients, spec, state, request);
  std::size_t expected = 0;
  for (const auto& c : clients) {
    for (const auto& [label, bucket] : c.syn.buckets) expected += label == 2 ? 0 : bucket.dim(0);
  }
  EXPECT_EQ(out.stages[0].samples, 2 * expected);
  EXPECT_TRUE(state.covers(cls(2)));
}

TEST_F(UnlearnTest, RelearnWarnsForTargetsNeverUnlearned) {
  UnlearnState state;
  relearn(params, {cls(1)}, 1, clients, spec, state, request);
  ASSERT_EQ(state.warnings.size(), 1u);
  EXPECT_NE(state.warnings[0].find("not unlearned"), std::string::npos);
}

TEST_F(UnlearnTest, RelearnNeedsARetainedBucket) {
  for (auto& c : clients) c.syn.buckets.erase(3);
  UnlearnState state;
  state.forgotten_classes = {3};
  EXPECT_THROW(relearn(params, {cls(3)}, 1, clients, spec, state, request), UnlearnError);
}

TEST(RequestParsing, ParsesCommandsAndSkipsComments) {
  std::istringstream in(
      "# header\n"
      "unlearn class=9\n"
      "\n"
      "batch class=1,client=3\n"
      "relearn class=9\n");
  const auto cmds = parse_requests(in);
  ASSERT_EQ(cmds.size(), 3u);
  EXPECT_EQ(cmds[0].kind, CommandKind::unlearn);
  EXPECT_EQ(cmds[0].targets, (std::vector<Target>{{TargetKind::class_label, 9}}));
  EXPECT_EQ(cmds[1].kind, CommandKind::batch);
  EXPECT_EQ(cmds[1].targets[1], (Target{TargetKind::client, 3}));
  EXPECT_EQ(cmds[2].line, 5u);
}

TEST(RequestParsing, RejectsMalformedLines) {
  auto line_of = [](const std::string& text) -> std::size_t {
    std::istringstream in(text);
    try {
      parse_requests(in);
    } catch (const RequestParseError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of("unlearn class=1\nforget class=2\n"), 2u);
  EXPECT_EQ(line_of("unlearn\n"), 1u);
  EXPECT_EQ(line_of("unlearn class=x\n"), 1u);
  EXPECT_EQ(line_of("unlearn class=-1\n"), 1u);
  EXPECT_EQ(line_of("unlearn node=1\n"), 1u);
  EXPECT_EQ(line_of("unlearn class=1 extra\n"), 1u);
}

TEST(RequestParsing, SampleTargetsAreUnsupported) {
  std::istringstream in("unlearn sample=17\n");
  try {
    parse_requests(in);
    FAIL() << "expected RequestParseError";
  } catch (const RequestParseError& e) {
    EXPECT_NE(std::string(e.what()).find("sample-level unlearning is not supported"),
              std::string::npos);
  }
}
