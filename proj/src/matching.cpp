#include <limits>

#include "fogdetr/detector.hpp"

namespace fogdetr {

// Shortest augmenting path form of the Hungarian method with row/column
// potentials; O(n^2 m) for n rows and m >= n columns.
Assignment solve_assignment(const Matrix& cost) {
  const Index n = cost.rows(), m = cost.cols();
  if (n > m) {
    throw ContractError("solve_assignment: " + std::to_string(n) + " rows exceed " + std::to_string(m) +
                        " columns");
  }
  if (!cost.allFinite()) throw EvaluationError("solve_assignment: non-finite cost");
  Assignment result;
  if (n == 0) return result;

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<Index> p(m + 1, 0), way(m + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const Index i0 = p[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  result.column_of_row.assign(n, -1);
  for (Index j = 1; j <= m; ++j) {
    if (p[j] != 0) result.column_of_row[p[j] - 1] = j - 1;
  }
  for (Index i = 0; i < n; ++i) result.total += cost(i, result.column_of_row[i]);
  return result;
}

Matrix matching_cost(const DetectionOutput& pred, const Annotation& gt, const LossWeights& w) {
  const Matrix& logits = pred.class_logits.value();
  const Matrix& boxes = pred.boxes.value();
  const Index m = boxes.rows();
  const Index g = static_cast<Index>(gt.size());
  Matrix probs(m, logits.cols());
  for (Index q = 0; q < m; ++q) {
    const Eigen::RowVectorXd e = (logits.row(q).array() - logits.row(q).maxCoeff()).exp().matrix();
    probs.row(q) = e / e.sum();
  }
  Matrix cost(g, m);
  for (Index i = 0; i < g; ++i) {
    const Box& target = gt.boxes[static_cast<std::size_t>(i)];
    const int label = gt.labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= logits.cols() - 1) {
      throw ContractError("matching_cost: label " + std::to_string(label) + " outside the class head");
    }
    for (Index q = 0; q < m; ++q) {
      const Eigen::Vector4d b = boxes.row(q).transpose();
      cost(i, q) = w.cls * (1.0 - probs(q, label)) + w.l1 * (b - target).cwiseAbs().sum() +
                   w.giou * (1.0 - generalized_iou(b, target));
    }
  }
  return cost;
}

MatchResult hungarian_match(const DetectionOutput& pred, const Annotation& gt, const LossWeights& w) {
  const Index m = pred.boxes.rows();
  if (static_cast<Index>(gt.size()) > m) {
    throw ContractError("hungarian_match: " + std::to_string(gt.size()) + " ground-truth boxes exceed " +
                        std::to_string(m) + " queries");
  }
  const Assignment a = solve_assignment(matching_cost(pred, gt, w));
  MatchResult r;
  for (std::size_t i = 0; i < a.column_of_row.size(); ++i) {
    r.pairs.emplace_back(a.column_of_row[i], static_cast<Index>(i));
  }
  return r;
}

}  // namespace fogdetr
