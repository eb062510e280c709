#pragma once

// Host-side post-processing of the two task heads plus evaluation
// metrics: YoloV2 box decoding and NMS for detection, per-pixel argmax
// for segmentation, per-class IoU/mIoU and AP/mAP.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "yuvnet/tensor.hpp"

namespace yuvnet {

struct Detection {
  int class_id = 0;
  float score = 0.0f;
  // Center/size box, normalized to [0,1] image coordinates.
  float cx = 0.0f, cy = 0.0f, w = 0.0f, h = 0.0f;
};

struct Anchor {
  float pw = 1.0f, ph = 1.0f;  // prior box size in grid-cell units
};

struct SegMap {
  std::uint32_t width = 0, height = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> ids;  // H*W, row-major
};

inline float box_iou(const Detection &a, const Detection &b) {
  const float ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
  const float ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const float bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
  const float by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const float iw = std::max(0.0f, std::min(ax1, bx1) - std::max(ax0, bx0));
  const float ih = std::max(0.0f, std::min(ay1, by1) - std::max(ay0, by0));
  const float inter = iw * ih;
  const float uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0f ? inter / uni : 0.0f;
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// Head layout is (1, A*(5+K), Gh, Gw); per anchor the channels are
// [tx, ty, tw, th, to, class logits...].
inline std::vector<Detection> decode_yolo(const FloatTensor &head,
                                          const std::vector<Anchor> &anchors,
                                          float conf_threshold) {
  if (head.shape.rank() != 4) throw ShapeMismatch("yolo head must be rank 4");
  const std::uint32_t ch = head.shape.dims[1], gh = head.shape.dims[2],
                      gw = head.shape.dims[3];
  const std::uint32_t a = std::uint32_t(anchors.size());
  if (a == 0 || ch % a != 0 || ch / a < 6)
    throw ShapeMismatch("yolo head channels must be anchors*(5+classes)");
  const std::uint32_t k = ch / a - 5;

  std::vector<Detection> dets;
  for (std::uint32_t an = 0; an < a; ++an)
    for (std::uint32_t i = 0; i < gh; ++i)
      for (std::uint32_t j = 0; j < gw; ++j) {
        auto at = [&](std::uint32_t c) { return head.at(0, an * (5 + k) + c, i, j); };
        const float obj = sigmoid(at(4));
        // Softmax over class logits, shifted for stability.
        float maxl = at(5);
        for (std::uint32_t c = 1; c < k; ++c) maxl = std::max(maxl, at(5 + c));
        float denom = 0.0f;
        for (std::uint32_t c = 0; c < k; ++c) denom += std::exp(at(5 + c) - maxl);
        int best = 0;
        float bestp = 0.0f;
        for (std::uint32_t c = 0; c < k; ++c) {
          const float p = std::exp(at(5 + c) - maxl) / denom;
          if (p > bestp) {
            bestp = p;
            best = int(c);
          }
        }
        const float score = obj * bestp;
        if (score < conf_threshold) continue;
        Detection d;
        d.class_id = best;
        d.score = score;
        d.cx = std::clamp((sigmoid(at(0)) + float(j)) / float(gw), 0.0f, 1.0f);
        d.cy = std::clamp((sigmoid(at(1)) + float(i)) / float(gh), 0.0f, 1.0f);
        d.w = std::min(1.0f, anchors[an].pw * std::exp(at(2)) / float(gw));
        d.h = std::min(1.0f, anchors[an].ph * std::exp(at(3)) / float(gh));
        dets.push_back(d);
      }
  return dets;
}

// Greedy per-class NMS; stable tie-break by score then input order.
inline std::vector<Detection> nms(const std::vector<Detection> &dets, float iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection &d = dets[idx];
    bool suppressed = false;
    for (const Detection &kd : kept)
      if (kd.class_id == d.class_id && box_iou(kd, d) >= iou_threshold) suppressed = true;
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// Per-pixel argmax over channels; ties go to the lowest class id.
inline SegMap seg_argmax(const FloatTensor &logits) {
  if (logits.shape.rank() != 4) throw ShapeMismatch("seg logits must be rank 4");
  const std::uint32_t k = logits.shape.dims[1], h = logits.shape.dims[2],
                      w = logits.shape.dims[3];
  SegMap m;
  m.width = w;
  m.height = h;
  m.num_classes = int(k);
  m.ids.resize(std::size_t(h) * w);
  for (std::uint32_t i = 0; i < h; ++i)
    for (std::uint32_t j = 0; j < w; ++j) {
      int best = 0;
      float bestv = logits.at(0, 0, i, j);
      for (std::uint32_t c = 1; c < k; ++c) {
        const float v = logits.at(0, c, i, j);
        if (v > bestv) {
          bestv = v;
          best = int(c);
        }
      }
      m.ids[std::size_t(i) * w + j] = std::uint8_t(best);
    }
  return m;
}

struct IouResult {
  // Empty optional: class absent from both prediction and ground truth,
  // excluded from the mean.
  std::vector<std::optional<double>> per_class;
  double miou = 0.0;
};

inline IouResult iou_per_class(const SegMap &pred, const SegMap &gt) {
  if (pred.width != gt.width || pred.height != gt.height ||
      pred.num_classes != gt.num_classes)
    throw ShapeMismatch("segmentation maps differ in size or class count");
  const int k = pred.num_classes;
  std::vector<std::uint64_t> tp(k, 0), fp(k, 0), fn(k, 0);
  for (std::size_t i = 0; i < pred.ids.size(); ++i) {
    const int p = pred.ids[i], g = gt.ids[i];
    if (p == g)
      ++tp[p];
    else {
      ++fp[p];
      ++fn[g];
    }
  }
  IouResult r;
  r.per_class.resize(k);
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < k; ++c) {
    const std::uint64_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;  // absent everywhere
    r.per_class[c] = double(tp[c]) / double(denom);
    sum += *r.per_class[c];
    ++counted;
  }
  r.miou = counted ? sum / counted : 0.0;
  return r;
}

struct GroundTruthBox {
  int class_id = 0;
  float cx = 0.0f, cy = 0.0f, w = 0.0f, h = 0.0f;
};

enum class ApInterpolation { AllPoint, ElevenPoint };

struct ApResult {
  std::vector<std::optional<double>> per_class;  // empty: no ground truth
  double map = 0.0;
};

// Detection AP: greedy score-descending matching to unmatched GT with
// IoU >= iou_match, then area under the precision-recall curve.
inline ApResult average_precision(const std::vector<std::vector<Detection>> &dets_per_image,
                                  const std::vector<std::vector<GroundTruthBox>> &gt_per_image,
                                  int num_classes, float iou_match = 0.5f,
                                  ApInterpolation interp = ApInterpolation::AllPoint) {
  if (dets_per_image.size() != gt_per_image.size())
    throw ShapeMismatch("detection/ground-truth image counts differ");
  ApResult result;
  result.per_class.resize(num_classes);
  double sum = 0.0;
  int counted = 0;

  for (int c = 0; c < num_classes; ++c) {
    std::size_t total_gt = 0;
    for (const auto &gts : gt_per_image)
      for (const auto &g : gts)
        if (g.class_id == c) ++total_gt;
    if (total_gt == 0) continue;

    struct Entry {
      float score;
      std::size_t image, order;
    };
    std::vector<Entry> entries;
    for (std::size_t im = 0; im < dets_per_image.size(); ++im)
      for (std::size_t d = 0; d < dets_per_image[im].size(); ++d)
        if (dets_per_image[im][d].class_id == c) entries.push_back({dets_per_image[im][d].score, im, d});
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry &a, const Entry &b) { return a.score > b.score; });

    std::vector<std::vector<bool>> matched(gt_per_image.size());
    for (std::size_t im = 0; im < gt_per_image.size(); ++im)
      matched[im].assign(gt_per_image[im].size(), false);

    std::vector<double> precision, recall;
    std::size_t tp = 0, fpn = 0;
    for (const Entry &e : entries) {
      const Detection &d = dets_per_image[e.image][e.order];
      double best_iou = 0.0;
      std::size_t best_g = SIZE_MAX;
      for (std::size_t gi = 0; gi < gt_per_image[e.image].size(); ++gi) {
        const auto &g = gt_per_image[e.image][gi];
        if (g.class_id != c || matched[e.image][gi]) continue;
        Detection gb{c, 1.0f, g.cx, g.cy, g.w, g.h};
        const double iou = box_iou(d, gb);
        if (iou > best_iou) {
          best_iou = iou;
          best_g = gi;
        }
      }
      if (best_g != SIZE_MAX && best_iou >= iou_match) {
        matched[e.image][best_g] = true;
        ++tp;
      } else {
        ++fpn;
      }
      precision.push_back(double(tp) / double(tp + fpn));
      recall.push_back(double(tp) / double(total_gt));
    }

    // Precision envelope (monotone non-increasing from the right).
    std::vector<double> env = precision;
    for (int i = int(env.size()) - 2; i >= 0; --i) env[i] = std::max(env[i], env[i + 1]);

    double ap = 0.0;
    if (interp == ApInterpolation::AllPoint) {
      double prev_r = 0.0;
      for (std::size_t i = 0; i < env.size(); ++i) {
        ap += (recall[i] - prev_r) * env[i];
        prev_r = recall[i];
      }
    } else {
      for (int s = 0; s <= 10; ++s) {
        const double r = s / 10.0;
        double p = 0.0;
        for (std::size_t i = 0; i < env.size(); ++i)
          if (recall[i] >= r) {
            p = env[i];
            break;
          }
        ap += p / 11.0;
      }
    }
    result.per_class[c] = ap;
    sum += ap;
    ++counted;
  }
  result.map = counted ? sum / counted : 0.0;
  return result;
}

}  // namespace yuvnet
