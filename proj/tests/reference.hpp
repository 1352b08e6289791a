#pragma once

// Brute-force references, written independently of the library code paths.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace atbias::reference {

struct Row {
  unsigned id;
  std::string piece;  // normalized
  double prob;
};

// Head set by literal set construction over every row.
inline std::set<unsigned> head(const std::vector<Row>& rows, double alpha, std::size_t k) {
  std::vector<double> probs;
  for (const auto& r : rows) probs.push_back(r.prob);
  std::sort(probs.begin(), probs.end(), std::greater<>());
  const double max_p = probs.front();
  const double kth = probs[std::min(k, probs.size()) - 1];
  std::set<unsigned> out;
  for (const auto& r : rows) {
    const bool in_prob = r.prob >= alpha * max_p;
    const bool in_rank = r.prob >= kth;
    if (in_prob && in_rank) out.insert(r.id);
  }
  return out;
}

inline std::set<std::string> grams(const std::string& s, std::size_t n) {
  std::set<std::string> g;
  if (s.size() < n) {
    g.insert(s);
    return g;
  }
  for (std::size_t i = 0; i + n <= s.size(); ++i) g.insert(s.substr(i, n));
  return g;
}

inline double sim(const std::string& piece, const std::string& entity, std::size_t n) {
  if (piece.empty()) return 0.0;
  if (entity.find(piece) == std::string::npos) return 0.0;
  const auto a = grams(piece, n);
  const auto b = grams(entity, n);
  std::set<std::string> inter, uni = a;
  for (const auto& x : b) {
    if (a.count(x) != 0) inter.insert(x);
    uni.insert(x);
  }
  return double(inter.size()) / double(uni.size());
}

// Adaptive-bias step: returns id -> score over the head set.
inline std::map<unsigned, double> bias(const std::vector<Row>& rows,
                                       const std::vector<std::string>& e_new,
                                       const std::vector<std::string>& e_para, double alpha,
                                       std::size_t k, std::size_t n, double lambda_new,
                                       double lambda_para, bool clamp = true) {
  const auto h = head(rows, alpha, k);
  double sum = 0.0;
  for (const auto& r : rows) {
    if (h.count(r.id) != 0) sum += r.prob;
  }
  const double mean = sum / double(h.size());
  std::map<unsigned, double> score;
  for (const auto& r : rows) {
    if (h.count(r.id) == 0) continue;
    double s = r.prob;
    for (const auto& e : e_new) s = s + lambda_new * mean * sim(r.piece, e, n);
    for (const auto& e : e_para) s = s - lambda_para * mean * sim(r.piece, e, n);
    score[r.id] = s;
  }
  if (clamp) {
    bool all_zero = true;
    for (auto& [id, s] : score) {
      if (s < 0.0) s = 0.0;
      if (s != 0.0) all_zero = false;
    }
    if (all_zero) {
      for (const auto& r : rows) {
        if (h.count(r.id) != 0) score[r.id] = r.prob;
      }
    }
  }
  return score;
}

inline unsigned argmax(const std::map<unsigned, double>& score) {
  unsigned best = score.begin()->first;
  for (const auto& [id, s] : score) {
    if (s > score.at(best)) best = id;  // map order: ties keep the lowest id
  }
  return best;
}

}  // namespace atbias::reference
