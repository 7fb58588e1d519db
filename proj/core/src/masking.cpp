// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "vlmim/diagnostics.hpp"
#include "vlmim/errors.hpp"

namespace vlmim {

bool PatchMask::contains(int patch) const { return std::binary_search(indices.begin(), indices.end(), patch); }

int mask_count(double ratio, int n) {
  if (n <= 0) throw InputError("mask_count: no patches");
  const int m = static_cast<int>(std::floor(ratio * n + 0.5));
  return std::clamp(m, 1, n);
}

template <typename T>
std::vector<double> patch_text_similarity(std::span<const T> patch_feats, std::span<const T> text_global, int batch,
                                          int n, int dim) {
  if (patch_feats.size() != static_cast<std::size_t>(batch) * n * dim ||
      text_global.size() != static_cast<std::size_t>(batch) * dim) {
    throw ShapeError("patch_text_similarity: feature sizes do not match batch/n/dim");
  }
  std::vector<double> out(static_cast<std::size_t>(batch) * n, 0.0);
  for (int b = 0; b < batch; ++b) {
    const T* t = text_global.data() + static_cast<std::size_t>(b) * dim;
    double tn = 0;
    for (int j = 0; j < dim; ++j) tn += static_cast<double>(t[j]) * t[j];
    tn = std::sqrt(tn);
    for (int i = 0; i < n; ++i) {
      const T* p = patch_feats.data() + (static_cast<std::size_t>(b) * n + i) * dim;
      double pn = 0;
      double dot = 0;
      for (int j = 0; j < dim; ++j) {
        pn += static_cast<double>(p[j]) * p[j];
        dot += static_cast<double>(p[j]) * t[j];
      }
      pn = std::sqrt(pn);
      out[static_cast<std::size_t>(b) * n + i] = (pn == 0.0 || tn == 0.0) ? 0.0 : std::clamp(dot / (pn * tn), -1.0, 1.0);
    }
  }
  return out;
}

std::vector<double> sampling_probabilities(std::span<const double> scores) {
  if (scores.empty()) throw InputError("sampling_probabilities: empty score vector");
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> p(scores.size());
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] = std::exp(scores[i] - mx));
  for (auto& x : p) x /= s;
  return p;
}

PatchMask sample_mask_count(std::span<const double> probs, int count, std::mt19937_64& rng) {
  const int n = static_cast<int>(probs.size());
  if (n == 0) throw InputError("sample_mask: empty probability vector");
  if (count < 1 || count > n) throw InputError("sample_mask: count must lie in [1, N]");
  double total = 0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InputError("sample_mask: probabilities must be finite and non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw InputError("sample_mask: probabilities do not sum to 1");

  PatchMask mask;
  mask.probs.assign(probs.begin(), probs.end());
  mask.count = count;
  mask.ratio = static_cast<double>(count) / n;

  std::vector<double> remaining(probs.begin(), probs.end());
  std::vector<std::uint8_t> taken(n, 0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  bool warned = false;
  for (int draw = 0; draw < count; ++draw) {
    double mass = 0;
    for (int i = 0; i < n; ++i) {
      if (!taken[i]) mass += remaining[i];
    }
    int pick = -1;
    if (mass > 0.0) {
      const double u = unit(rng) * mass;
      double acc = 0;
      for (int i = 0; i < n; ++i) {
        if (taken[i] || remaining[i] <= 0.0) continue;
        acc += remaining[i];
        pick = i;
        if (u < acc) break;
      }
    } else {
      if (!warned) {
        emit_diagnostic("sample_mask: only " + std::to_string(draw) + " of " + std::to_string(count) +
                        " draws had positive probability; falling back to uniform");
        warned = true;
      }
      const int free_slots = n - draw;
      std::uniform_int_distribution<int> pick_free(0, free_slots - 1);
      int k = pick_free(rng);
      for (int i = 0; i < n; ++i) {
        if (taken[i]) continue;
        if (k-- == 0) {
          pick = i;
          break;
        }
      }
    }
    taken[pick] = 1;
    mask.indices.push_back(pick);
  }
  std::sort(mask.indices.begin(), mask.indices.end());
  return mask;
}

PatchMask sample_mask(std::span<const double> probs, double ratio, std::mt19937_64& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InputError("sample_mask: ratio must lie in (0, 1)");
  const int n = static_cast<int>(probs.size());
  PatchMask m = sample_mask_count(probs, mask_count(ratio, n), rng);
  m.ratio = ratio;
  return m;
}

PatchMask random_mask(int n, double ratio, std::mt19937_64& rng) {
  if (n <= 0) throw InputError("random_mask: no patches");
  const std::vector<double> uniform(static_cast<std::size_t>(n), 1.0 / n);
  return sample_mask(uniform, ratio, rng);
}

template std::vector<double> patch_text_similarity<float>(std::span<const float>, std::span<const float>, int, int, int);
template std::vector<double> patch_text_similarity<double>(std::span<const double>, std::span<const double>, int, int,
                                                           int);

}  // namespace vlmim
