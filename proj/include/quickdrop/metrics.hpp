#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "quickdrop/data.hpp"
#include "quickdrop/model.hpp"
#include "quickdrop/rng.hpp"

namespace quickdrop {

/// Per-class Top-1 counts plus the F-Set / R-Set split derived from them.
struct AccuracyReport {
  std::vector<std::uint64_t> correct;
  std::vector<std::uint64_t> total;
  std::vector<int> forget_classes;
  std::optional<double> fset;
  std::optional<double> rset;
  double overall = 0.0;

  double class_accuracy(std::size_t c) const {
    return total[c] == 0 ? 0.0
                         : static_cast<double>(correct[c]) / static_cast<double>(total[c]);
  }

  /// Recomputes every derived accuracy from the stored counts.
  static AccuracyReport from_counts(std::vector<std::uint64_t> correct,
                                    std::vector<std::uint64_t> total,
                                    std::vector<int> forget_classes) {
    AccuracyReport r;
    r.correct = std::move(correct);
    r.total = std::move(total);
    std::sort(forget_classes.begin(), forget_classes.end());
    forget_classes.erase(std::unique(forget_classes.begin(), forget_classes.end()),
                         forget_classes.end());
    r.forget_classes = std::move(forget_classes);
    const std::set<int> forget(r.forget_classes.begin(), r.forget_classes.end());
    std::uint64_t fc = 0, ft = 0, rc = 0, rt = 0;
    for (std::size_t c = 0; c < r.total.size(); ++c) {
      if (forget.contains(static_cast<int>(c))) {
        fc += r.correct[c];
        ft += r.total[c];
      } else {
        rc += r.correct[c];
        rt += r.total[c];
      }
    }
    if (ft) r.fset = static_cast<double>(fc) / static_cast<double>(ft);
    if (rt) r.rset = static_cast<double>(rc) / static_cast<double>(rt);
    if (ft + rt) r.overall = static_cast<double>(fc + rc) / static_cast<double>(ft + rt);
    return r;
  }
};

inline constexpr std::size_t kEvalChunk = 512;

template <class T>
AccuracyReport accuracy_report(const ParamSet<T>& params, const ArchSpec& spec,
                               const LabeledDataset& test,
                               const std::vector<int>& forget_classes) {
  std::vector<std::uint64_t> correct(test.classes, 0), total(test.classes, 0);
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < test.size(); start += kEvalChunk) {
    rows.clear();
    for (std::size_t i = start; i < std::min(test.size(), start + kEvalChunk); ++i) {
      rows.push_back(i);
    }
    const auto pred = predict(params, spec, gather_images<T>(test, rows));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto y = static_cast<std::size_t>(test.labels[rows[i]]);
      ++total[y];
      correct[y] += pred[i] == test.labels[rows[i]];
    }
  }
  return AccuracyReport::from_counts(std::move(correct), std::move(total), forget_classes);
}

template <class T>
std::vector<double> dataset_losses(const ParamSet<T>& params, const ArchSpec& spec,
                                   const LabeledDataset& data) {
  std::vector<double> out;
  out.reserve(data.size());
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    rows.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + kEvalChunk); ++i) {
      rows.push_back(i);
    }
    std::vector<int> labels;
    for (std::size_t r : rows) labels.push_back(data.labels[r]);
    const auto losses = per_sample_losses(params, spec, gather_images<T>(data, rows), labels);
    out.insert(out.end(), losses.begin(), losses.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss-threshold membership inference
// ---------------------------------------------------------------------------

struct MiaConfig {
  std::uint64_t seed = 0;
  /// Pools larger than this are subsampled before the attack.
  std::size_t max_pool = 1000;
};

struct MiaResult {
  double threshold = 0.0;
  double train_balanced_accuracy = 0.0;
  double eval_balanced_accuracy = 0.0;
  /// Fraction of the forget pool classified as training members.
  double forget_member_rate = 0.0;
};

namespace detail {

inline double balanced_accuracy(const std::vector<double>& members,
                                const std::vector<double>& nonmembers, double threshold) {
  const auto hits = std::count_if(members.begin(), members.end(),
                                  [&](double l) { return l <= threshold; });
  const auto rejects = std::count_if(nonmembers.begin(), nonmembers.end(),
                                     [&](double l) { return l > threshold; });
  return 0.5 * (static_cast<double>(hits) / static_cast<double>(members.size()) +
                static_cast<double>(rejects) / static_cast<double>(nonmembers.size()));
}

inline std::vector<double> subsample(std::vector<double> values, std::size_t cap, Rng& rng) {
  std::shuffle(values.begin(), values.end(), rng);
  if (values.size() > cap) values.resize(cap);
  return values;
}

}  // namespace detail

/// Fits the single loss threshold that best separates member from
/// non-member losses (predict "member" when loss <= threshold), using half of
/// each pool; the other halves measure how well the threshold transfers.
inline MiaResult mia_from_losses(std::vector<double> member, std::vector<double> nonmember,
                                 const std::vector<double>& forget, const MiaConfig& cfg) {
  if (member.size() < 2 || nonmember.size() < 2 || forget.empty()) {
    throw std::invalid_argument("mia_attack: member and non-member pools need >= 2 "
                                "samples and the forget pool >= 1");
  }
  Rng rng = make_rng(cfg.seed, "mia");
  member = detail::subsample(std::move(member), cfg.max_pool, rng);
  nonmember = detail::subsample(std::move(nonmember), cfg.max_pool, rng);
  const std::size_t mh = member.size() / 2, nh = nonmember.size() / 2;
  const std::vector<double> m_fit(member.begin(), member.begin() + static_cast<std::ptrdiff_t>(mh));
  const std::vector<double> m_eval(member.begin() + static_cast<std::ptrdiff_t>(mh), member.end());
  const std::vector<double> n_fit(nonmember.begin(), nonmember.begin() + static_cast<std::ptrdiff_t>(nh));
  const std::vector<double> n_eval(nonmember.begin() + static_cast<std::ptrdiff_t>(nh), nonmember.end());

  std::vector<double> candidates = m_fit;
  candidates.insert(candidates.end(), n_fit.begin(), n_fit.end());
  std::sort(candidates.begin(), candidates.end());
  MiaResult result;
  result.threshold = -std::numeric_limits<double>::infinity();
  result.train_balanced_accuracy = detail::balanced_accuracy(m_fit, n_fit, result.threshold);
  for (double tau : candidates) {
    const double acc = detail::balanced_accuracy(m_fit, n_fit, tau);
    if (acc > result.train_balanced_accuracy) {
      result.train_balanced_accuracy = acc;
      result.threshold = tau;
    }
  }
  result.eval_balanced_accuracy = detail::balanced_accuracy(m_eval, n_eval, result.threshold);
  const auto members = std::count_if(forget.begin(), forget.end(),
                                     [&](double l) { return l <= result.threshold; });
  result.forget_member_rate = static_cast<double>(members) / static_cast<double>(forget.size());
  return result;
}

template <class T>
MiaResult mia_attack(const ParamSet<T>& params, const ArchSpec& spec,
                     const LabeledDataset& member_pool, const LabeledDataset& nonmember_pool,
                     const LabeledDataset& forget_pool, const MiaConfig& cfg) {
  const std::set<std::size_t> member_ids(member_pool.ids.begin(), member_pool.ids.end());
  for (std::size_t id : forget_pool.ids) {
    if (member_ids.contains(id)) {
      throw std::invalid_argument("mia_attack: forget pool overlaps member pool (id " +
                                  std::to_string(id) + ")");
    }
  }
  return mia_from_losses(dataset_losses(params, spec, member_pool),
                         dataset_losses(params, spec, nonmember_pool),
                         dataset_losses(params, spec, forget_pool), cfg);
}

}  // namespace quickdrop
