#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "odg/eval.hpp"
#include "odg/losses.hpp"
#include "odg/style.hpp"
#include "odg/synth.hpp"

namespace odg {

/// Desk-scale two-stage oriented detector: 4-block backbone, single fused
/// pyramid level at stride 4, an RPN over square anchors, horizontal RoI
/// pooling, an HRoI->RRoI refinement head, rotated RoI alignment, and
/// classification/regression heads.
struct DetectorConfig {
  int image_size = 64;
  std::vector<int> channels = {8, 16, 32, 32};
  int pyramid_channels = 32;
  int pooled_size = 4;
  int embed_dim = 128;
  int proj_hidden = 128;
  int num_classes = 3;
  int proposals = 16;
  double tau = 0.1;
  std::vector<double> anchor_scales = {8.0, 16.0, 32.0};
  int pre_nms_topk = 256;
  double rpn_nms_iou = 0.7;
  double rpn_pos_iou = 0.5;
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  double smooth_l1_beta = 0.1;

  bool style = true;
  bool hcl = true;
  bool rac = true;
  bool sec = true;
  std::array<bool, 4> style_blocks = {true, true, true, true};
  SecMetric sec_metric = SecMetric::Jsd;

  // test hook: compute the hallucinated branch even when nothing needs it
  bool force_hallucinated_branch = false;

  int pyramid_stride() const { return 4; }
  int pyramid_size() const { return image_size / pyramid_stride(); }
  int pooled_dim() const { return pyramid_channels * pooled_size * pooled_size; }

  bool needs_hallucinated_branch() const {
    return style || hcl || rac || sec || force_hallucinated_branch;
  }

  void validate() const {
    if (proposals < 2) throw ConfigError("proposals must be >= 2 (the losses need a negative)");
    if (tau <= 0.0) throw ConfigError("tau must be positive");
    if (embed_dim < 8) throw ConfigError("embed_dim must be >= 8");
    if (channels.size() != 4) throw ConfigError("expected 4 backbone channel widths");
    if (image_size % 4 != 0) throw ConfigError("image_size must be divisible by 4");
    if (anchor_scales.empty()) throw ConfigError("need at least one anchor scale");
  }
};

/// RPN output: a horizontal box, its objectness, and the anchor it came from.
struct Proposal {
  HorizontalBox hbox;
  double objectness = 0.0;
  int source_anchor = -1;
};

struct Detector {
  DetectorConfig cfg;
  ParamStore params;

  void init(std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 1));
    init_backbone(params, "backbone", 3, cfg.channels, rng);
    for (int i = 0; i < 4; ++i)
      init_conv(params, "fpn.lat" + std::to_string(i + 1), cfg.channels[static_cast<std::size_t>(i)],
                cfg.pyramid_channels, 1, rng);
    const int a = static_cast<int>(cfg.anchor_scales.size());
    init_conv(params, "rpn.conv", cfg.pyramid_channels, cfg.pyramid_channels, 3, rng);
    init_conv_head(params, "rpn.obj", cfg.pyramid_channels, a, 1, rng);
    // background prior: fresh nets should score anchors low
    for (double& v : params.value("rpn.obj.b").data) v = -2.0;
    init_conv_head(params, "rpn.delta", cfg.pyramid_channels, 4 * a, 1, rng);
    init_linear(params, "rroi.l1", cfg.pooled_dim(), cfg.proj_hidden, rng);
    init_linear_head(params, "rroi.l2", cfg.proj_hidden, 5, rng);
    init_linear(params, "head.l1", cfg.pooled_dim(), cfg.proj_hidden, rng);
    init_linear(params, "head.l2", cfg.proj_hidden, cfg.proj_hidden, rng);
    init_linear_head(params, "head.cls", cfg.proj_hidden, cfg.num_classes + 1, rng);
    init_linear_head(params, "head.box", cfg.proj_hidden, 5, rng);
    init_projection_heads(params, cfg.pooled_dim(), cfg.proj_hidden, cfg.embed_dim, rng);
    init_category_heads(params, cfg.pooled_dim(), cfg.proj_hidden, cfg.num_classes, rng);
  }
};

// ---------------------------------------------------------------------------
// forward building blocks

/// Project all four blocks to the pyramid width, bring them to stride 4, sum.
/// Takes exactly one branch's blocks; branches are never mixed because each
/// call sees one array.
inline Var fpn_fuse(Tape& t, ParamStore& ps, const std::array<Var, 4>& blocks) {
  static constexpr int kPool[4] = {4, 2, 1, 1};
  std::optional<Var> fused;
  for (int i = 0; i < 4; ++i) {
    Var lat = conv_layer(t, ps, "fpn.lat" + std::to_string(i + 1), blocks[static_cast<std::size_t>(i)], 1, 0);
    Var resized = avg_pool(lat, kPool[i]);
    fused = fused ? add(*fused, resized) : resized;
  }
  return *fused;
}

inline std::vector<HorizontalBox> make_anchors(const DetectorConfig& cfg) {
  const int g = cfg.pyramid_size();
  const double stride = cfg.pyramid_stride();
  std::vector<HorizontalBox> anchors;
  anchors.reserve(static_cast<std::size_t>(cfg.anchor_scales.size()) * g * g);
  for (std::size_t a = 0; a < cfg.anchor_scales.size(); ++a)
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x) {
        const double s = cfg.anchor_scales[a];
        const double cx = (x + 0.5) * stride;
        const double cy = (y + 0.5) * stride;
        anchors.push_back(HorizontalBox{cx - 0.5 * s, cy - 0.5 * s, s, s});
      }
  return anchors;
}

struct RpnMaps {
  Var objectness;  // (A, g, g) logits
  Var deltas;      // (4A, g, g)
};

inline RpnMaps rpn_forward(Tape& t, ParamStore& ps, Var pyramid) {
  Var h = relu(conv_layer(t, ps, "rpn.conv", pyramid, 1, 1));
  return RpnMaps{conv_layer(t, ps, "rpn.obj", h, 1, 0), conv_layer(t, ps, "rpn.delta", h, 1, 0)};
}

inline HorizontalBox clip_to_image(HorizontalBox b, double size) {
  double x0 = std::clamp(b.x, 0.0, size - 1.0);
  double y0 = std::clamp(b.y, 0.0, size - 1.0);
  double x1 = std::clamp(b.x + b.w, x0 + 1.0, size);
  double y1 = std::clamp(b.y + b.h, y0 + 1.0, size);
  return HorizontalBox{x0, y0, x1 - x0, y1 - y0};
}

inline HorizontalBox apply_hbox_deltas(const HorizontalBox& anchor, double dx, double dy, double dw,
                                       double dh) {
  const double cx = anchor.cx() + dx * anchor.w;
  const double cy = anchor.cy() + dy * anchor.h;
  const double w = anchor.w * std::exp(std::clamp(dw, -4.0, 4.0));
  const double h = anchor.h * std::exp(std::clamp(dh, -4.0, 4.0));
  return HorizontalBox{cx - 0.5 * w, cy - 0.5 * h, w, h};
}

/// Decode, clip, prune with horizontal NMS, and return exactly n proposals
/// (padding from the suppressed candidates if the NMS survivors run short).
inline std::vector<Proposal> decode_proposals(const DetectorConfig& cfg, const Tensor& objectness,
                                              const Tensor& deltas,
                                              const std::vector<HorizontalBox>& anchors) {
  const int g = cfg.pyramid_size();
  const int na = static_cast<int>(cfg.anchor_scales.size());
  std::vector<Proposal> candidates;
  candidates.reserve(anchors.size());
  for (int a = 0; a < na; ++a)
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x) {
        const int anchor_idx = (a * g + y) * g + x;
        const double logit = objectness.at(a, y, x);
        const double score = logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit))
                                          : std::exp(logit) / (1.0 + std::exp(logit));
        const HorizontalBox decoded =
            apply_hbox_deltas(anchors[static_cast<std::size_t>(anchor_idx)], deltas.at(4 * a + 0, y, x),
                              deltas.at(4 * a + 1, y, x), deltas.at(4 * a + 2, y, x),
                              deltas.at(4 * a + 3, y, x));
        candidates.push_back(Proposal{clip_to_image(decoded, cfg.image_size), score, anchor_idx});
      }
  std::vector<int> order(candidates.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    if (candidates[static_cast<std::size_t>(i)].objectness != candidates[static_cast<std::size_t>(j)].objectness)
      return candidates[static_cast<std::size_t>(i)].objectness > candidates[static_cast<std::size_t>(j)].objectness;
    return i < j;
  });
  const int topk = std::min<int>(cfg.pre_nms_topk, static_cast<int>(order.size()));
  std::vector<HorizontalBox> top_boxes;
  std::vector<double> top_scores;
  for (int i = 0; i < topk; ++i) {
    top_boxes.push_back(candidates[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].hbox);
    top_scores.push_back(candidates[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].objectness);
  }
  const std::vector<int> kept = horizontal_nms(top_boxes, top_scores, cfg.rpn_nms_iou);
  std::vector<Proposal> out;
  std::vector<char> taken(static_cast<std::size_t>(topk), 0);
  for (int k : kept) {
    if (static_cast<int>(out.size()) >= cfg.proposals) break;
    out.push_back(candidates[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
    taken[static_cast<std::size_t>(k)] = 1;
  }
  for (int i = 0; i < topk && static_cast<int>(out.size()) < cfg.proposals; ++i) {
    if (!taken[static_cast<std::size_t>(i)])
      out.push_back(candidates[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
  }
  return out;
}

/// Bilinear pooling over a regular grid inside a horizontal box, flattened to
/// one row (1, C * g * g).
inline Var hroi_pool(Var pyramid, const HorizontalBox& box, int stride, int grid) {
  std::vector<std::pair<double, double>> pts;
  pts.reserve(static_cast<std::size_t>(grid) * grid);
  for (int iy = 0; iy < grid; ++iy)
    for (int ix = 0; ix < grid; ++ix) {
      const double x = box.x + (ix + 0.5) / grid * box.w;
      const double y = box.y + (iy + 0.5) / grid * box.h;
      pts.emplace_back(x / stride, y / stride);
    }
  Var sampled = bilinear_sample(pyramid, pts);  // (C, g*g)
  const int c = pyramid.val().shape[0];
  return reshape(sampled, {1, c * grid * grid});
}

/// Same pooling on a grid rotated to the box axes.
inline Var rroi_align(Var pyramid, const OrientedBox& box, int stride, int grid) {
  box.validate();
  const double c = std::cos(box.theta), s = std::sin(box.theta);
  std::vector<std::pair<double, double>> pts;
  pts.reserve(static_cast<std::size_t>(grid) * grid);
  for (int iy = 0; iy < grid; ++iy)
    for (int ix = 0; ix < grid; ++ix) {
      const double u = ((ix + 0.5) / grid - 0.5) * box.w;
      const double v = ((iy + 0.5) / grid - 0.5) * box.h;
      const double x = box.cx + u * c - v * s;
      const double y = box.cy + u * s + v * c;
      pts.emplace_back(x / stride, y / stride);
    }
  Var sampled = bilinear_sample(pyramid, pts);
  const int ch = pyramid.val().shape[0];
  return reshape(sampled, {1, ch * grid * grid});
}

inline Var pool_rois_horizontal(Var pyramid, const std::vector<Proposal>& props, int stride, int grid) {
  std::vector<Var> rows;
  rows.reserve(props.size());
  for (const Proposal& p : props) rows.push_back(hroi_pool(pyramid, p.hbox, stride, grid));
  return concat_rows(rows);
}

inline Var pool_rois_rotated(Var pyramid, const std::vector<OrientedBox>& boxes, int stride, int grid) {
  std::vector<Var> rows;
  rows.reserve(boxes.size());
  for (const OrientedBox& b : boxes) rows.push_back(rroi_align(pyramid, b, stride, grid));
  return concat_rows(rows);
}

/// HRoI -> RRoI refinement head. Returns the (n,5) prediction matrix whose
/// angle column is already squashed to (-pi/2, pi/2) via pi*(sigmoid(t)-0.5).
inline Var rroi_head_forward(Tape& t, ParamStore& ps, Var pooled_h) {
  Var h = relu(linear_layer(t, ps, "rroi.l1", pooled_h));
  Var raw = linear_layer(t, ps, "rroi.l2", h);
  Var offsets = slice_cols(raw, 0, 4);
  Var theta = scalar_mul(scalar_add(sigmoid(slice_cols(raw, 4, 5)), -0.5), M_PI);
  return concat_cols(offsets, theta);
}

/// Turn rroi-head predictions into oriented boxes (w, h stay positive through
/// the exp parameterization).
inline std::vector<OrientedBox> boxes_from_rroi_pred(const Tensor& pred5,
                                                     const std::vector<Proposal>& props,
                                                     double image_size) {
  std::vector<OrientedBox> out;
  out.reserve(props.size());
  for (std::size_t i = 0; i < props.size(); ++i) {
    const HorizontalBox& hb = props[i].hbox;
    const double cx = hb.cx() + pred5.at(static_cast<int>(i), 0) * hb.w;
    const double cy = hb.cy() + pred5.at(static_cast<int>(i), 1) * hb.h;
    const double w = std::clamp(hb.w * std::exp(std::clamp(pred5.at(static_cast<int>(i), 2), -4.0, 4.0)),
                                1e-3, 2.0 * image_size);
    const double h = std::clamp(hb.h * std::exp(std::clamp(pred5.at(static_cast<int>(i), 3), -4.0, 4.0)),
                                1e-3, 2.0 * image_size);
    out.push_back(OrientedBox::make(std::clamp(cx, 0.0, image_size), std::clamp(cy, 0.0, image_size),
                                    w, h, pred5.at(static_cast<int>(i), 4)));
  }
  return out;
}

struct HeadOutputs {
  Var class_logits;  // (n, K+1), background last
  Var box_deltas;    // (n, 5)
};

inline HeadOutputs heads_forward(Tape& t, ParamStore& ps, Var pooled_r) {
  Var h = relu(linear_layer(t, ps, "head.l1", pooled_r));
  h = relu(linear_layer(t, ps, "head.l2", h));
  return HeadOutputs{linear_layer(t, ps, "head.cls", h), linear_layer(t, ps, "head.box", h)};
}

/// Final refinement applied in the RRoI's rotated frame.
inline OrientedBox apply_rbox_deltas(const OrientedBox& r, double dx, double dy, double dw, double dh,
                                     double dtheta, double image_size) {
  const double c = std::cos(r.theta), s = std::sin(r.theta);
  const double cx = r.cx + dx * r.w * c - dy * r.h * s;
  const double cy = r.cy + dx * r.w * s + dy * r.h * c;
  const double w = std::clamp(r.w * std::exp(std::clamp(dw, -4.0, 4.0)), 1e-3, 2.0 * image_size);
  const double h = std::clamp(r.h * std::exp(std::clamp(dh, -4.0, 4.0)), 1e-3, 2.0 * image_size);
  return OrientedBox::make(std::clamp(cx, 0.0, image_size), std::clamp(cy, 0.0, image_size), w, h,
                           r.theta + dtheta);
}

// ---------------------------------------------------------------------------
// target assignment

struct RoiAssignment {
  std::vector<int> gates;       // 1 iff best IoU >= 0.5
  std::vector<int> matched_gt;  // argmax-IoU ground truth, -1 when none
  std::vector<double> best_iou;
};

/// Gate semantics match gate_sigma (max-IoU >= 0.5) without re-logging per
/// RoI; callers warn once per degenerate image.
inline RoiAssignment assign_horizontal(const std::vector<Proposal>& props,
                                       const std::vector<Annotation>& gts) {
  RoiAssignment out;
  std::vector<HorizontalBox> hulls;
  for (const Annotation& a : gts) hulls.push_back(aabb_hull(a.box));
  for (const Proposal& p : props) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t gi = 0; gi < hulls.size(); ++gi) {
      const double iou = horizontal_iou(p.hbox, hulls[gi]);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(gi);
      }
    }
    out.gates.push_back(best_iou >= 0.5 ? 1 : 0);
    out.matched_gt.push_back(best);
    out.best_iou.push_back(best_iou);
  }
  return out;
}

inline RoiAssignment assign_rotated(const std::vector<OrientedBox>& rois,
                                    const std::vector<Annotation>& gts) {
  RoiAssignment out;
  for (const OrientedBox& r : rois) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      const double iou = rotated_iou(r, gts[gi].box);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(gi);
      }
    }
    out.gates.push_back(best_iou >= 0.5 ? 1 : 0);
    out.matched_gt.push_back(best);
    out.best_iou.push_back(best_iou);
  }
  return out;
}

// ---------------------------------------------------------------------------
// RPN targets

struct RpnTargets {
  std::vector<double> obj_targets;  // per flat anchor index
  std::vector<double> obj_weights;
  std::vector<int> positives;  // flat anchor indices with box targets
  Tensor box_targets;          // (#positives, 4)
};

/// Anchor labels against ground-truth hulls. Objectness: positive at
/// IoU >= rpn_pos_iou plus the best anchor of each ground truth; anchors in
/// the [0.3, pos) band are ignored; negatives are sampled from below 0.3 as
/// the hardest by current logit plus a random batch. Box deltas train on
/// every anchor with IoU >= 0.3 so that whole anchor clusters converge onto
/// their object and NMS can collapse them, freeing proposal slots.
inline RpnTargets rpn_targets(const DetectorConfig& cfg, const std::vector<HorizontalBox>& anchors,
                              const std::vector<Annotation>& gts, Rng& rng,
                              const Tensor* current_logits = nullptr) {
  constexpr double kNegIou = 0.3;
  const int n = static_cast<int>(anchors.size());
  RpnTargets out;
  out.obj_targets.assign(static_cast<std::size_t>(n), 0.0);
  out.obj_weights.assign(static_cast<std::size_t>(n), 0.0);

  std::vector<double> best_iou(static_cast<std::size_t>(n), 0.0);
  std::vector<int> best_gt(static_cast<std::size_t>(n), -1);
  std::vector<int> gt_best_anchor(gts.size(), -1);
  std::vector<double> gt_best_iou(gts.size(), 0.0);
  std::vector<HorizontalBox> hulls;
  for (const Annotation& a : gts) hulls.push_back(aabb_hull(a.box));
  for (int i = 0; i < n; ++i) {
    for (std::size_t gi = 0; gi < hulls.size(); ++gi) {
      const double iou = horizontal_iou(anchors[static_cast<std::size_t>(i)], hulls[gi]);
      if (iou > best_iou[static_cast<std::size_t>(i)]) {
        best_iou[static_cast<std::size_t>(i)] = iou;
        best_gt[static_cast<std::size_t>(i)] = static_cast<int>(gi);
      }
      if (iou > gt_best_iou[gi]) {
        gt_best_iou[gi] = iou;
        gt_best_anchor[gi] = i;
      }
    }
  }

  std::vector<char> forced(static_cast<std::size_t>(n), 0);
  for (std::size_t gi = 0; gi < gts.size(); ++gi)
    if (gt_best_anchor[gi] >= 0 && gt_best_iou[gi] > 0.1) {
      forced[static_cast<std::size_t>(gt_best_anchor[gi])] = 1;
      if (best_gt[static_cast<std::size_t>(gt_best_anchor[gi])] < 0)
        best_gt[static_cast<std::size_t>(gt_best_anchor[gi])] = static_cast<int>(gi);
    }
  std::vector<int> pos, neg, box_anchors;
  for (int i = 0; i < n; ++i) {
    const bool is_pos =
        best_iou[static_cast<std::size_t>(i)] >= cfg.rpn_pos_iou || forced[static_cast<std::size_t>(i)];
    if (is_pos) pos.push_back(i);
    if (is_pos || best_iou[static_cast<std::size_t>(i)] >= kNegIou) {
      if (best_gt[static_cast<std::size_t>(i)] >= 0) box_anchors.push_back(i);
    } else {
      neg.push_back(i);
    }
  }
  if (static_cast<int>(pos.size()) > 16) {
    rng.shuffle(pos);
    pos.resize(16);
    std::sort(pos.begin(), pos.end());
  }
  if (static_cast<int>(box_anchors.size()) > 32) {
    rng.shuffle(box_anchors);
    box_anchors.resize(32);
    std::sort(box_anchors.begin(), box_anchors.end());
  }
  std::vector<int> sampled_neg;
  const int hard = 8, random = 16;
  if (current_logits != nullptr && static_cast<int>(neg.size()) > hard) {
    std::vector<int> by_logit = neg;
    std::sort(by_logit.begin(), by_logit.end(), [&](int a, int b) {
      const double la = current_logits->data[static_cast<std::size_t>(a)];
      const double lb = current_logits->data[static_cast<std::size_t>(b)];
      if (la != lb) return la > lb;
      return a < b;
    });
    sampled_neg.assign(by_logit.begin(), by_logit.begin() + hard);
  }
  rng.shuffle(neg);
  for (int i : neg) {
    if (static_cast<int>(sampled_neg.size()) >= hard + random) break;
    if (std::find(sampled_neg.begin(), sampled_neg.end(), i) == sampled_neg.end())
      sampled_neg.push_back(i);
  }

  // balanced weighting: positives and negatives each carry half the mass,
  // and every ground truth contributes equally regardless of how many
  // anchors it owns (big objects must not drown small ones)
  if (!pos.empty()) {
    std::vector<int> per_gt(gts.size(), 0);
    for (int i : pos) per_gt[static_cast<std::size_t>(best_gt[static_cast<std::size_t>(i)])]++;
    int gts_with_pos = 0;
    for (int c : per_gt) gts_with_pos += c > 0 ? 1 : 0;
    for (int i : pos) {
      const int gi = best_gt[static_cast<std::size_t>(i)];
      out.obj_targets[static_cast<std::size_t>(i)] = 1.0;
      out.obj_weights[static_cast<std::size_t>(i)] =
          0.5 / (static_cast<double>(gts_with_pos) * per_gt[static_cast<std::size_t>(gi)]);
    }
  }
  if (!sampled_neg.empty()) {
    for (int i : sampled_neg)
      out.obj_weights[static_cast<std::size_t>(i)] = 0.5 / static_cast<double>(sampled_neg.size());
  }

  out.box_targets = Tensor({std::max<int>(1, static_cast<int>(box_anchors.size())), 4});
  for (std::size_t pi = 0; pi < box_anchors.size(); ++pi) {
    const int i = box_anchors[pi];
    const HorizontalBox& a = anchors[static_cast<std::size_t>(i)];
    const HorizontalBox& g = hulls[static_cast<std::size_t>(best_gt[static_cast<std::size_t>(i)])];
    out.box_targets.at(static_cast<int>(pi), 0) = (g.cx() - a.cx()) / a.w;
    out.box_targets.at(static_cast<int>(pi), 1) = (g.cy() - a.cy()) / a.h;
    out.box_targets.at(static_cast<int>(pi), 2) = std::log(g.w / a.w);
    out.box_targets.at(static_cast<int>(pi), 3) = std::log(g.h / a.h);
    out.positives.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// training forward

struct ImageLossVars {
  std::optional<Var> cls, reg, hcl, rac, sec;
};

/// Frozen geometry for gradient checking: pooling grids and assignments stay
/// fixed while parameters are perturbed.
struct FixedGeometry {
  std::vector<Proposal> proposals;
  std::vector<OrientedBox> rrois;
};

namespace detail {

inline Var branch_average(Var orig, std::optional<Var> hallu) {
  if (!hallu) return orig;
  return scalar_mul(add(orig, *hallu), 0.5);
}

/// RPN objectness + anchor box loss for one branch's maps.
inline Var rpn_loss(Tape& t, const DetectorConfig& cfg, const RpnMaps& maps, const RpnTargets& tg,
                    Var& out_box_loss) {
  const int g = cfg.pyramid_size();
  const int na = static_cast<int>(cfg.anchor_scales.size());
  Var obj_flat = reshape(maps.objectness, {na * g * g});
  Var obj_loss = bce_logits(obj_flat, tg.obj_targets, tg.obj_weights);
  if (!tg.positives.empty()) {
    Var flat = reshape(maps.deltas, {4 * na * g * g, 1});
    std::vector<int> idx;
    idx.reserve(tg.positives.size() * 4);
    for (int anchor : tg.positives) {
      const int a = anchor / (g * g);
      const int rem = anchor % (g * g);
      for (int j = 0; j < 4; ++j) idx.push_back((4 * a + j) * g * g + rem);
    }
    Var rows = reshape(gather_rows(flat, idx), {static_cast<int>(tg.positives.size()), 4});
    out_box_loss = smooth_l1(rows, tg.box_targets, std::vector<double>(tg.positives.size(), 1.0),
                             cfg.smooth_l1_beta);
  } else {
    out_box_loss = t.scalar(0.0);
  }
  return obj_loss;
}

}  // namespace detail

/// Full per-image training forward: both branches, detection losses, and the
/// consistency objectives. Proposal and RRoI geometry comes from the original
/// branch and is shared verbatim with the hallucinated branch.
inline ImageLossVars image_forward_losses(Tape& t, Detector& det, const Sample& sample,
                                          const StyleBank* bank, Rng& rng,
                                          const FixedGeometry* fixed = nullptr) {
  const DetectorConfig& cfg = det.cfg;
  ParamStore& ps = det.params;
  const int stride = cfg.pyramid_stride();
  const int grid = cfg.pooled_size;
  if (sample.boxes.empty()) log_warn("training image with no objects");

  Var img = t.constant(sample.image);
  const std::array<Var, 4> blocks = backbone_forward(t, ps, "backbone", img);

  const bool branch = cfg.needs_hallucinated_branch();
  std::optional<std::array<Var, 4>> hallu_blocks;
  if (branch) {
    std::array<Var, 4> hb = blocks;
    if (cfg.style) {
      if (bank == nullptr || bank->empty())
        throw InvalidInput("style hallucination enabled but no style bank provided");
      const StyleEntry& entry = sample_style(*bank, rng);
      for (int i = 0; i < 4; ++i)
        if (cfg.style_blocks[static_cast<std::size_t>(i)])
          hb[static_cast<std::size_t>(i)] =
              adain_transfer(blocks[static_cast<std::size_t>(i)], entry.blocks[static_cast<std::size_t>(i)]);
    }
    hallu_blocks = hb;
  }

  Var pyramid = fpn_fuse(t, ps, blocks);
  std::optional<Var> pyramid_h;
  if (branch) pyramid_h = fpn_fuse(t, ps, *hallu_blocks);

  // RPN: losses on both branches, proposal geometry from the original only.
  const std::vector<HorizontalBox> anchors = make_anchors(cfg);
  const RpnMaps maps = rpn_forward(t, ps, pyramid);
  const RpnTargets rpn_tg = rpn_targets(cfg, anchors, sample.boxes, rng, &maps.objectness.val());
  Var rpn_box_loss{};
  Var rpn_obj_loss = detail::rpn_loss(t, cfg, maps, rpn_tg, rpn_box_loss);
  std::optional<Var> rpn_obj_h, rpn_box_h;
  if (branch) {
    const RpnMaps maps_h = rpn_forward(t, ps, *pyramid_h);
    Var box_h{};
    rpn_obj_h = detail::rpn_loss(t, cfg, maps_h, rpn_tg, box_h);
    rpn_box_h = box_h;
  }

  const std::vector<Proposal> proposals =
      fixed ? fixed->proposals
            : decode_proposals(cfg, maps.objectness.val(), maps.deltas.val(), anchors);

  Var pooled_h = pool_rois_horizontal(pyramid, proposals, stride, grid);
  std::optional<Var> pooled_h_hallu;
  if (branch) pooled_h_hallu = pool_rois_horizontal(*pyramid_h, proposals, stride, grid);

  // HRoI -> RRoI refinement, trained on gated proposals of both branches.
  const RoiAssignment assign_h = assign_horizontal(proposals, sample.boxes);
  Var pred5 = rroi_head_forward(t, ps, pooled_h);
  const int n = static_cast<int>(proposals.size());
  Tensor rroi_targets({n, 5});
  std::vector<double> rroi_weights(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    if (!assign_h.gates[static_cast<std::size_t>(i)]) continue;
    const OrientedBox& g = sample.boxes[static_cast<std::size_t>(assign_h.matched_gt[static_cast<std::size_t>(i)])].box;
    const HorizontalBox& hb = proposals[static_cast<std::size_t>(i)].hbox;
    rroi_targets.at(i, 0) = (g.cx - hb.cx()) / hb.w;
    rroi_targets.at(i, 1) = (g.cy - hb.cy()) / hb.h;
    rroi_targets.at(i, 2) = std::log(g.w / hb.w);
    rroi_targets.at(i, 3) = std::log(g.h / hb.h);
    rroi_targets.at(i, 4) = g.theta;
    rroi_weights[static_cast<std::size_t>(i)] = 1.0;
  }
  Var rroi_loss = smooth_l1(pred5, rroi_targets, rroi_weights, cfg.smooth_l1_beta);
  std::optional<Var> rroi_loss_h;
  if (branch)
    rroi_loss_h = smooth_l1(rroi_head_forward(t, ps, *pooled_h_hallu), rroi_targets, rroi_weights,
                            cfg.smooth_l1_beta);

  const std::vector<OrientedBox> rrois =
      fixed ? fixed->rrois : boxes_from_rroi_pred(pred5.val(), proposals, cfg.image_size);

  Var pooled_r = pool_rois_rotated(pyramid, rrois, stride, grid);
  std::optional<Var> pooled_r_hallu;
  if (branch) pooled_r_hallu = pool_rois_rotated(*pyramid_h, rrois, stride, grid);

  // classification targets with 1:3 positive:negative sampling
  const RoiAssignment assign_r = assign_rotated(rrois, sample.boxes);
  std::vector<int> cls_labels(static_cast<std::size_t>(n), cfg.num_classes);
  std::vector<double> cls_weights(static_cast<std::size_t>(n), 0.0);
  std::vector<int> positives, negatives;
  for (int i = 0; i < n; ++i) {
    if (assign_r.gates[static_cast<std::size_t>(i)]) {
      cls_labels[static_cast<std::size_t>(i)] =
          sample.boxes[static_cast<std::size_t>(assign_r.matched_gt[static_cast<std::size_t>(i)])].class_id;
      positives.push_back(i);
    } else {
      negatives.push_back(i);
    }
  }
  const int want_neg = std::max(4, 3 * static_cast<int>(positives.size()));
  if (static_cast<int>(negatives.size()) > want_neg) {
    rng.shuffle(negatives);
    negatives.resize(static_cast<std::size_t>(want_neg));
    std::sort(negatives.begin(), negatives.end());
  }
  for (int i : positives) cls_weights[static_cast<std::size_t>(i)] = 1.0;
  for (int i : negatives) cls_weights[static_cast<std::size_t>(i)] = 1.0;

  Tensor box_targets({n, 5});
  std::vector<double> box_weights(static_cast<std::size_t>(n), 0.0);
  for (int i : positives) {
    const OrientedBox& r = rrois[static_cast<std::size_t>(i)];
    const OrientedBox& g = sample.boxes[static_cast<std::size_t>(assign_r.matched_gt[static_cast<std::size_t>(i)])].box;
    const double c = std::cos(r.theta), s = std::sin(r.theta);
    const double ox = g.cx - r.cx, oy = g.cy - r.cy;
    box_targets.at(i, 0) = (ox * c + oy * s) / r.w;
    box_targets.at(i, 1) = (-ox * s + oy * c) / r.h;
    box_targets.at(i, 2) = std::log(g.w / r.w);
    box_targets.at(i, 3) = std::log(g.h / r.h);
    box_targets.at(i, 4) = wrap_half_pi(g.theta - r.theta);
    box_weights[static_cast<std::size_t>(i)] = 1.0;
  }

  const HeadOutputs heads = heads_forward(t, ps, pooled_r);
  Var cls_loss = cross_entropy_rows(heads.class_logits, cls_labels, cls_weights);
  Var box_loss = smooth_l1(heads.box_deltas, box_targets, box_weights, cfg.smooth_l1_beta);
  std::optional<Var> cls_loss_h, box_loss_h;
  if (branch) {
    const HeadOutputs heads_h = heads_forward(t, ps, *pooled_r_hallu);
    cls_loss_h = cross_entropy_rows(heads_h.class_logits, cls_labels, cls_weights);
    box_loss_h = smooth_l1(heads_h.box_deltas, box_targets, box_weights, cfg.smooth_l1_beta);
  }

  ImageLossVars out;
  out.cls = add(detail::branch_average(cls_loss, cls_loss_h),
                detail::branch_average(rpn_obj_loss, rpn_obj_h));
  out.reg = add(add(detail::branch_average(box_loss, box_loss_h),
                    detail::branch_average(rroi_loss, rroi_loss_h)),
                detail::branch_average(rpn_box_loss, rpn_box_h));

  if (cfg.hcl) {
    Var z_orig = project_embeddings(t, ps, PooledRois{pooled_h, Branch::Original, Stage::HRoI},
                                    ProjectionHead::F1);
    Var z_hallu = project_embeddings(t, ps, PooledRois{*pooled_h_hallu, Branch::Hallucinated, Stage::HRoI},
                                     ProjectionHead::F2);
    out.hcl = info_nce_gated(make_embedding_batch(z_orig, z_hallu, assign_h.gates), cfg.tau);
  }
  if (cfg.rac) {
    Var z_orig = project_embeddings(t, ps, PooledRois{pooled_r, Branch::Original, Stage::RRoI},
                                    ProjectionHead::F3);
    Var z_hallu = project_embeddings(t, ps, PooledRois{*pooled_r_hallu, Branch::Hallucinated, Stage::RRoI},
                                     ProjectionHead::F4);
    out.rac = info_nce_gated(make_embedding_batch(z_orig, z_hallu, assign_r.gates), cfg.tau);
  }
  if (cfg.sec) {
    std::vector<int> gated;
    for (int i = 0; i < n; ++i)
      if (assign_r.gates[static_cast<std::size_t>(i)]) gated.push_back(i);
    if (!gated.empty()) {
      Var p = category_distribution(t, ps, PooledRois{pooled_r, Branch::Original, Stage::RRoI});
      Var q = category_distribution(t, ps, PooledRois{*pooled_r_hallu, Branch::Hallucinated, Stage::RRoI});
      out.sec = consistency_variant(gather_rows(p, gated), gather_rows(q, gated), cfg.sec_metric);
    } else {
      out.sec = t.scalar(0.0);
    }
  }
  return out;
}

struct StepLosses {
  double cls = 0.0, reg = 0.0, hcl = 0.0, rac = 0.0, sec = 0.0, total = 0.0;
};

/// Forward the whole batch on one tape and return the total plus its parts.
/// Disabled terms are exactly zero.
inline std::pair<Var, StepLosses> batch_losses(Tape& t, Detector& det,
                                               const std::vector<const Sample*>& batch,
                                               const StyleBank* bank, Rng& rng) {
  if (batch.empty()) throw InvalidInput("batch_losses: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  std::optional<Var> cls, reg, hcl, rac, sec;
  auto accumulate = [](std::optional<Var>& acc, const std::optional<Var>& v) {
    if (!v) return;
    acc = acc ? add(*acc, *v) : *v;
  };
  for (const Sample* s : batch) {
    ImageLossVars parts = image_forward_losses(t, det, *s, bank, rng);
    accumulate(cls, parts.cls);
    accumulate(reg, parts.reg);
    accumulate(hcl, parts.hcl);
    accumulate(rac, parts.rac);
    accumulate(sec, parts.sec);
  }
  StepLosses values;
  std::vector<std::pair<Var, double>> enabled;
  auto finish = [&](std::optional<Var>& acc, double& slot) -> void {
    if (!acc) return;
    Var mean = scalar_mul(*acc, inv);
    slot = mean.val().scalar();
    enabled.emplace_back(mean, 1.0);
  };
  finish(cls, values.cls);
  finish(reg, values.reg);
  finish(hcl, values.hcl);
  finish(rac, values.rac);
  finish(sec, values.sec);
  Var total = total_loss(t, enabled);
  values.total = total.val().scalar();
  return {total, values};
}

/// One optimizer step over a batch.
inline StepLosses train_step(Detector& det, const std::vector<const Sample*>& batch,
                             const StyleBank* bank, Rng& rng, SgdOptimizer& opt) {
  Tape tape;
  auto [total, values] = batch_losses(tape, det, batch, bank, rng);
  det.params.zero_grad();
  tape.backward(total);
  opt.step(det.params);
  return values;
}

// ---------------------------------------------------------------------------
// inference

/// Original branch only: propose, refine to rotated boxes, classify, apply
/// final deltas, then per-class rotated NMS above the score threshold.
/// Background is never emitted.
inline std::vector<Detection> detect_image(Detector& det, const Tensor& image, int image_id = 0) {
  const DetectorConfig& cfg = det.cfg;
  Tape t(false);
  Var img = t.constant(image);
  const std::array<Var, 4> blocks = backbone_forward(t, det.params, "backbone", img);
  Var pyramid = fpn_fuse(t, det.params, blocks);
  const RpnMaps maps = rpn_forward(t, det.params, pyramid);
  const std::vector<HorizontalBox> anchors = make_anchors(cfg);
  const std::vector<Proposal> proposals =
      decode_proposals(cfg, maps.objectness.val(), maps.deltas.val(), anchors);
  Var pooled_h = pool_rois_horizontal(pyramid, proposals, cfg.pyramid_stride(), cfg.pooled_size);
  Var pred5 = rroi_head_forward(t, det.params, pooled_h);
  const std::vector<OrientedBox> rrois = boxes_from_rroi_pred(pred5.val(), proposals, cfg.image_size);
  Var pooled_r = pool_rois_rotated(pyramid, rrois, cfg.pyramid_stride(), cfg.pooled_size);
  const HeadOutputs heads = heads_forward(t, det.params, pooled_r);
  const Tensor probs = softmax_rows(heads.class_logits).val();
  const Tensor& deltas = heads.box_deltas.val();

  const int n = static_cast<int>(rrois.size());
  std::vector<OrientedBox> final_boxes;
  final_boxes.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    final_boxes.push_back(apply_rbox_deltas(rrois[static_cast<std::size_t>(i)], deltas.at(i, 0),
                                            deltas.at(i, 1), deltas.at(i, 2), deltas.at(i, 3),
                                            deltas.at(i, 4), cfg.image_size));

  std::vector<Detection> detections;
  for (int c = 0; c < cfg.num_classes; ++c) {
    std::vector<OrientedBox> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      const double score = probs.at(i, c);
      if (score > cfg.score_threshold) {
        boxes.push_back(final_boxes[static_cast<std::size_t>(i)]);
        scores.push_back(score);
      }
    }
    if (boxes.empty()) continue;
    for (int k : rotated_nms(boxes, scores, cfg.nms_iou))
      detections.push_back(Detection{image_id, boxes[static_cast<std::size_t>(k)], c,
                                     scores[static_cast<std::size_t>(k)]});
  }
  return detections;
}

}  // namespace odg
