#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "quickdrop/federated.hpp"
#include "support.hpp"

using namespace quickdrop;

namespace {

struct FedSetup {
  ArchSpec spec = qdtest::small_mlp(3);
  Partition part;
  FedConfig cfg;

  FedSetup() {
    part = dirichlet_partition(synth_blobs(qdtest::blob_spec(3, 40), 1), 3, 0.5, 2);
    cfg.rounds = 3;
    cfg.local_steps = 2;
    cfg.lr = 0.1;
    cfg.batch_per_class = 4;
    cfg.seed = 5;
    cfg.distill_cfg.syn_lr = 0.05;
    cfg.distill_cfg.scale = 10;
  }
};

// Runs rounds one at a time so every intermediate global model is visible.
template <class Train>
std::vector<ParamSet<double>> trajectory(FedSetup& s, bool with_synthetic, Train train) {
  auto clients = make_clients<double>(s.part.clients, 10, s.cfg.seed, with_synthetic);
  FedConfig one = s.cfg;
  one.rounds = 1;
  std::vector<ParamSet<double>> out{init_params<double>(s.spec, {derive_seed(s.cfg.seed, "model.init")})};
  for (std::size_t k = 0; k < s.cfg.rounds; ++k) {
    // Participation depends on the round index, so keep it at full here.
    out.push_back(train(clients, s.spec, one, out.back()).params);
  }
  return out;
}

}  // namespace

TEST(Aggregate, WeightedMeanMatchesReference) {
  const auto spec = qdtest::small_mlp(2);
  std::vector<ParamSet<double>> models;
  for (std::uint64_t s = 0; s < 3; ++s) models.push_back(init_params<double>(spec, {s}));
  const std::vector<double> w{0.2, 0.5, 0.3};
  const auto avg = aggregate(models, w);
  for (std::size_t l = 0; l < avg.size(); ++l) {
    for (std::size_t j = 0; j < avg[l].value.numel(); ++j) {
      double ref = 0.0;
      for (std::size_t i = 0; i < 3; ++i) ref += w[i] * models[i][l].value.values()[j];
      EXPECT_NEAR(avg[l].value.values()[j], ref, 1e-15);
    }
  }
}

TEST(Aggregate, IdenticalOrOneHotReproducesExactly) {
  const auto spec = qdtest::small_mlp(2);
  const auto a = init_params<float>(spec, {1});
  const auto b = init_params<float>(spec, {2});
  EXPECT_TRUE(aggregate<float>({a, a, a}, {0.3, 0.3, 0.4}).bitwise_equal(a));
  EXPECT_TRUE(aggregate<float>({a, b}, {1.0, 0.0}).bitwise_equal(a));
  EXPECT_TRUE(aggregate<float>({a}, {1.0}).bitwise_equal(a));
}

TEST(Aggregate, RejectsBadWeights) {
  const auto spec = qdtest::small_mlp(2);
  const auto a = init_params<float>(spec, {1});
  EXPECT_THROW(aggregate<float>({a, a}, {0.5}), std::invalid_argument);
  EXPECT_THROW(aggregate<float>({a, a}, {0.5, 0.6}), std::invalid_argument);
  EXPECT_THROW(aggregate<float>({a, a}, {1.5, -0.5}), std::invalid_argument);
  EXPECT_THROW(aggregate<float>({}, {}), std::invalid_argument);
  EXPECT_THROW(aggregate<float>({a, init_params<float>(qdtest::small_mlp(3), {1})}, {0.5, 0.5}),
               ShapeError);
}

TEST(Federated, DistillationDisabledEqualsFedAvgBitwise) {
  FedSetup s;
  s.cfg.distill = false;
  const auto a = trajectory(s, true, [](auto& c, auto& spec, auto& cfg, auto p) {
    return train_federated<double>(c, spec, cfg, p);
  });
  const auto b = trajectory(s, false, [](auto& c, auto& spec, auto& cfg, auto p) {
    return train_fedavg<double>(c, spec, cfg, p);
  });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(a[k].bitwise_equal(b[k])) << "round " << k;
}

TEST(Federated, MatchingLeavesTrajectoryUnchanged) {
  FedSetup s;
  auto clients = make_clients<double>(s.part.clients, 10, s.cfg.seed, true);
  const auto before = clients[0].syn;
  const auto a = trajectory(s, true, [&](auto& c, auto& spec, auto& cfg, auto p) {
    return train_federated<double>(c, spec, cfg, p);
  });
  const auto b = trajectory(s, false, [](auto& c, auto& spec, auto& cfg, auto p) {
    return train_fedavg<double>(c, spec, cfg, p);
  });
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(a[k].bitwise_equal(b[k])) << "round " << k;

  auto trained = make_clients<double>(s.part.clients, 10, s.cfg.seed, true);
  train_federated<double>(trained, s.spec, s.cfg);
  EXPECT_FALSE(trained[0].syn.bitwise_equal(before));
  for (const auto& c : trained) {
    EXPECT_EQ(c.reuse_count, s.cfg.rounds * s.cfg.local_steps);
    EXPECT_EQ(c.counters.match_steps,
              s.cfg.rounds * s.cfg.local_steps * c.syn.held_classes().size());
  }
}

TEST(Federated, ThreadCountDoesNotChangeResult) {
  FedSetup s;
  s.cfg.participation = 0.7;
  auto c1 = make_clients<double>(s.part.clients, 10, s.cfg.seed);
  auto c2 = make_clients<double>(s.part.clients, 10, s.cfg.seed);
  const auto r1 = train_federated<double>(c1, s.spec, s.cfg);
  s.cfg.threads = 2;
  const auto r2 = train_federated<double>(c2, s.spec, s.cfg);
  EXPECT_TRUE(r1.params.bitwise_equal(r2.params));
  for (std::size_t i = 0; i < c1.size(); ++i) EXPECT_TRUE(c1[i].syn.bitwise_equal(c2[i].syn));
  EXPECT_EQ(r1.samples, r2.samples);
}

TEST(Federated, RoundRecordsDescribeTheRound) {
  FedSetup s;
  auto clients = make_clients<float>(s.part.clients, 10, s.cfg.seed);
  const auto r = train_federated<float>(clients, s.spec, s.cfg);
  ASSERT_EQ(r.records.size(), s.cfg.rounds);
  std::uint64_t samples = 0;
  for (const auto& rec : r.records) {
    double sum = 0.0;
    for (double w : rec.weights) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(rec.clients.size(), 3u);
    samples += rec.samples;
  }
  EXPECT_EQ(samples, r.samples);
}

TEST(Federated, TrainingLearnsSeparableBlobs) {
  FedSetup s;
  s.cfg.rounds = 10;
  s.cfg.local_steps = 5;
  s.cfg.lr = 0.3;
  s.cfg.distill = false;
  auto clients = make_clients<float>(s.part.clients, 10, s.cfg.seed, false);
  const auto r = train_fedavg<float>(clients, s.spec, s.cfg);
  const auto test = synth_blobs(qdtest::blob_spec(3, 40), 1, 1);
  const auto pred = predict(r.params, s.spec, all_images<float>(test));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == test.labels[i];
  EXPECT_GT(static_cast<double>(hits) / pred.size(), 0.9);
}

TEST(Participation, SampleSizeAndDeterminism) {
  for (std::size_t round = 0; round < 20; ++round) {
    const auto ids = sample_clients(10, 0.3, 4, round);
    EXPECT_EQ(ids.size(), 3u);
    EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
    EXPECT_EQ(ids, sample_clients(10, 0.3, 4, round));
  }
  EXPECT_EQ(sample_clients(10, 0.01, 4, 0).size(), 1u);
  EXPECT_EQ(sample_clients(4, 1.0, 4, 0), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_THROW(sample_clients(4, 0.0, 4, 0), std::invalid_argument);
}

TEST(ParallelFor, PropagatesFailures) {
  std::vector<int> hit(5, 0);
  parallel_for(5, 3, [&](std::size_t i) { hit[i] = 1; });
  EXPECT_EQ(hit, std::vector<int>(5, 1));
  EXPECT_THROW(parallel_for(4, 2, [](std::size_t i) {
                 if (i == 3) throw NumericError("boom");
               }),
               NumericError);
}

TEST(RoundCsv, WritesOneLinePerRound) {
  const auto dir = qdtest::scratch_dir("rounds");
  std::vector<RoundRecord> recs(2);
  recs[0] = {0, {0, 2}, {1, 1}, {0.25, 0.75}, 1.5, 10};
  recs[1] = {1, {1}, {1}, {1.0}, 2.0, 4};
  write_round_csv((dir / "r.csv").string(), recs);
  std::ifstream in(dir / "r.csv");
  std::string header, l0, l1;
  std::getline(in, header);
  std::getline(in, l0);
  std::getline(in, l1);
  EXPECT_EQ(header, "round,client_ids,wall_ms,samples,weights_digest");
  EXPECT_EQ(l0.rfind("0,0;2,1.500,10,", 0), 0u) << l0;
  EXPECT_EQ(l1.substr(l1.size() - 16), weights_digest({1.0}));
  EXPECT_THROW(write_round_csv((dir / "missing" / "r.csv").string(), recs), std::ios_base::failure);
}
