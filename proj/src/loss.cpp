#include <algorithm>

#include "fogdetr/detector.hpp"

namespace fogdetr {

namespace {

// Per-pair generalized IoU of predicted boxes against constant targets, k x 1.
Tensor giou_column(const Tensor& pred, const Matrix& target) {
  auto col = [&](Index c) { return slice_cols(pred, c, 1); };
  auto half = [&](Index c) { return scale(col(c), 0.5); };
  Tensor px0 = sub(col(0), half(2)), px1 = add(col(0), half(2));
  Tensor py0 = sub(col(1), half(3)), py1 = add(col(1), half(3));

  auto constant = [](const Eigen::VectorXd& v) { return Tensor::from_matrix(Matrix(v)); };
  const Eigen::VectorXd tcx = target.col(0), tcy = target.col(1), tw = target.col(2), th = target.col(3);
  Tensor gx0 = constant(tcx - tw / 2), gx1 = constant(tcx + tw / 2);
  Tensor gy0 = constant(tcy - th / 2), gy1 = constant(tcy + th / 2);
  Tensor garea = constant(tw.cwiseProduct(th));

  Tensor iw = relu(sub(minimum(px1, gx1), maximum(px0, gx0)));
  Tensor ih = relu(sub(minimum(py1, gy1), maximum(py0, gy0)));
  Tensor inter = mul(iw, ih);
  Tensor uni = sub(add(mul(col(2), col(3)), garea), inter);
  Tensor enclose = mul(sub(maximum(px1, gx1), minimum(px0, gx0)), sub(maximum(py1, gy1), minimum(py0, gy0)));
  return sub(div(inter, uni), div(sub(enclose, uni), enclose));
}

}  // namespace

LossTerms detection_loss(const DetectionOutput& pred, const Annotation& gt, const MatchResult& match,
                         const LossWeights& w) {
  const Index m = pred.class_logits.rows();
  const Index classes = pred.class_logits.cols();
  const Index no_object = classes - 1;

  // Weighted cross-entropy: unmatched queries target the no-object class.
  std::vector<Index> target(static_cast<std::size_t>(m), no_object);
  std::vector<bool> seen_gt(gt.size(), false);
  for (const auto& [q, g] : match.pairs) {
    if (q < 0 || q >= m || g < 0 || g >= static_cast<Index>(gt.size()) || seen_gt[static_cast<std::size_t>(g)] ||
        target[static_cast<std::size_t>(q)] != no_object) {
      throw ContractError("detection_loss: match is not a valid one-to-one assignment");
    }
    seen_gt[static_cast<std::size_t>(g)] = true;
    target[static_cast<std::size_t>(q)] = gt.labels[static_cast<std::size_t>(g)];
  }
  Matrix picks = Matrix::Zero(m, classes);
  double weight_sum = 0.0;
  for (Index q = 0; q < m; ++q) {
    const Index t = target[static_cast<std::size_t>(q)];
    const double wq = t == no_object ? w.no_object : 1.0;
    picks(q, t) = wq;
    weight_sum += wq;
  }
  Tensor ce = weight_sum > 0
                  ? scale(sum(mul(log_softmax_rows(pred.class_logits), Tensor::from_matrix(picks))), -1.0 / weight_sum)
                  : Tensor::scalar(0.0);

  LossTerms terms;
  terms.cls = scale(ce, w.cls);
  if (match.pairs.empty()) {
    terms.l1 = Tensor::scalar(0.0);
    terms.giou = Tensor::scalar(0.0);
  } else {
    const double boxes = static_cast<double>(std::max<std::size_t>(1, gt.size()));
    std::vector<Index> rows;
    Matrix target_boxes(static_cast<Index>(match.pairs.size()), 4);
    for (std::size_t k = 0; k < match.pairs.size(); ++k) {
      rows.push_back(match.pairs[k].first);
      target_boxes.row(static_cast<Index>(k)) = gt.boxes[static_cast<std::size_t>(match.pairs[k].second)].transpose();
    }
    Tensor matched = gather_rows(pred.boxes, rows);
    Tensor l1 = scale(sum(abs(sub(matched, Tensor::from_matrix(target_boxes)))), 1.0 / boxes);
    Tensor giou = scale(add_scalar(neg(sum(giou_column(matched, target_boxes))), static_cast<double>(rows.size())),
                        1.0 / boxes);
    terms.l1 = scale(l1, w.l1);
    terms.giou = scale(giou, w.giou);
  }
  terms.total = add(add(terms.cls, terms.l1), terms.giou);
  return terms;
}

}  // namespace fogdetr
