#pragma once

// Reference implementations written without the library's helpers.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace memechain::oracle {

// Full pairwise cosine, full sort, take the first k.
inline std::vector<std::pair<std::size_t, double>> brute_top_k(const std::vector<std::vector<float>>& rows,
                                                               const std::vector<float>& q, std::size_t k,
                                                               long exclude = -1) {
  std::vector<std::pair<std::size_t, double>> all;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<long>(i) == exclude) continue;
    double d = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < q.size(); ++j) {
      d += double(rows[i][j]) * double(q[j]);
      na += double(rows[i][j]) * double(rows[i][j]);
      nb += double(q[j]) * double(q[j]);
    }
    all.emplace_back(i, d / (std::sqrt(na) * std::sqrt(nb)));
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

// Every (positive, negative) pair; ties count one half.
inline double brute_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / double(pairs);
}

inline double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  double tp = 0, tn = 0, p = 0, n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (labels[i] == 1) {
      ++p;
      tp += pred[i] == 1;
    } else {
      ++n;
      tn += pred[i] == 0;
    }
  }
  return (tp / p + tn / n) / 2.0;
}

// Normalized weighted sum, then unit length.
inline std::vector<double> fuse_formula(const std::vector<double>& t, const std::vector<double>& i, double wt,
                                        double wi, bool normalize) {
  std::vector<double> out(t.size());
  for (std::size_t j = 0; j < t.size(); ++j) out[j] = wt / (wt + wi) * t[j] + wi / (wt + wi) * i[j];
  if (normalize) {
    double n = 0;
    for (double x : out) n += x * x;
    for (auto& x : out) x /= std::sqrt(n);
  }
  return out;
}

}  // namespace memechain::oracle
