#include "tbps/backbone.hpp"

#include <cmath>

namespace tbps {

using ad::Var;

BaseNetParams BaseNetParams::init(const ModelConfig& cfg, Rng& rng) {
  BaseNetParams p;
  p.w1 = conv_param(cfg.stem1_channels, 3, 3, rng);
  p.b1 = zero_param({cfg.stem1_channels});
  p.w2 = conv_param(cfg.stem2_channels, cfg.stem1_channels, 3, rng);
  p.b2 = zero_param({cfg.stem2_channels});
  p.w3 = conv_param(cfg.base_channels, cfg.stem2_channels, 3, rng);
  p.b3 = zero_param({cfg.base_channels});
  return p;
}

void BaseNetParams::collect(const std::string& prefix, Group group, ParamList& out) const {
  out.push_back({prefix + ".w1", w1, group});
  out.push_back({prefix + ".b1", b1, group});
  out.push_back({prefix + ".w2", w2, group});
  out.push_back({prefix + ".b2", b2, group});
  out.push_back({prefix + ".w3", w3, group});
  out.push_back({prefix + ".b3", b3, group});
}

Var base_forward(const Var& image, const BaseNetParams& p) {
  require(image.value().rank() == 3 && image.shape()[0] == 3,
          "base_forward: expected a [3,H,W] image, got " + shape_str(image.shape()));
  Var x = ad::relu(ad::conv2d(image, p.w1, p.b1, 2, 1));
  x = ad::relu(ad::conv2d(x, p.w2, p.b2, 2, 1));
  return ad::relu(ad::conv2d(x, p.w3, p.b3, 2, 1));
}

namespace {

// One bilinear tap set; weights are zero when the point falls outside.
struct Tap {
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  double w00 = 0, w01 = 0, w10 = 0, w11 = 0;
  double dy_mul = 0, dx_mul = 0;  // 0 where the coordinate is clamped
  double ly = 0, lx = 0;
  bool inside = false;
};

void axis(double v, int size, int& lo, int& hi, double& l, double& d) {
  d = 1.0;
  if (v <= 0) {
    v = 0;
    d = 0.0;
  }
  lo = static_cast<int>(v);
  if (lo >= size - 1) {
    lo = hi = size - 1;
    v = lo;
    d = 0.0;
  } else {
    hi = lo + 1;
  }
  l = v - lo;
}

Tap make_tap(double y, double x, int h, int w) {
  Tap t;
  if (y < -1.0 || y > h || x < -1.0 || x > w) return t;
  t.inside = true;
  axis(y, h, t.y0, t.y1, t.ly, t.dy_mul);
  axis(x, w, t.x0, t.x1, t.lx, t.dx_mul);
  const double hy = 1 - t.ly, hx = 1 - t.lx;
  t.w00 = hy * hx;
  t.w01 = hy * t.lx;
  t.w10 = t.ly * hx;
  t.w11 = t.ly * t.lx;
  return t;
}

}  // namespace

Var roi_align(const Var& fm, const std::vector<BBox>& boxes, int pooled, double spatial_scale,
              int sampling_ratio, const Var& box_grad) {
  require(fm.value().rank() == 3, "roi_align: feature map must be [C,H,W]");
  require(pooled > 0 && sampling_ratio > 0, "roi_align: pooled size and sampling ratio must be positive");
  const int c = fm.shape()[0], h = fm.shape()[1], w = fm.shape()[2];
  const int n = static_cast<int>(boxes.size());
  const int g = sampling_ratio;
  const int p = pooled;
  if (box_grad.defined())
    require(box_grad.shape() == std::vector<int>{n, 4}, "roi_align: box tensor must be [N,4]");

  struct Sample {
    Tap tap;
    double ty, tx;  // fractional bin position in [0,1]
  };
  std::vector<Sample> samples(static_cast<std::size_t>(n) * p * p * g * g);
  for (int r = 0; r < n; ++r) {
    const BBox& b = boxes[r];
    const double sx = b.x1 * spatial_scale - 0.5, sy = b.y1 * spatial_scale - 0.5;
    const double rw = b.x2 * spatial_scale - 0.5 - sx, rh = b.y2 * spatial_scale - 0.5 - sy;
    require(rw > 0 && rh > 0, "roi_align: degenerate box " + std::to_string(r));
    for (int ph = 0; ph < p; ++ph)
      for (int pw = 0; pw < p; ++pw)
        for (int iy = 0; iy < g; ++iy)
          for (int ix = 0; ix < g; ++ix) {
            Sample& s = samples[(((static_cast<std::size_t>(r) * p + ph) * p + pw) * g + iy) * g + ix];
            s.ty = (ph + (iy + 0.5) / g) / p;
            s.tx = (pw + (ix + 0.5) / g) / p;
            s.tap = make_tap(sy + s.ty * rh, sx + s.tx * rw, h, w);
          }
  }

  // Channels-last copy so that every bilinear tap reads a contiguous run.
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> hwc(plane * c);
  const double* f = fm.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t k = 0; k < plane; ++k) hwc[k * c + ch] = f[ch * plane + k];

  Tensor out({n, c, p, p});
  const double inv = 1.0 / (g * g);
  const int pp = p * p;
  std::vector<double> stage(static_cast<std::size_t>(pp) * c);
  for (int r = 0; r < n; ++r) {
    std::fill(stage.begin(), stage.end(), 0.0);
    for (int bin = 0; bin < pp; ++bin) {
      const Sample* s = &samples[(static_cast<std::size_t>(r) * pp + bin) * g * g];
      double* __restrict ac = &stage[static_cast<std::size_t>(bin) * c];
      for (int k = 0; k < g * g; ++k) {
        const Tap& t = s[k].tap;
        if (!t.inside) continue;
        const double* a = &hwc[(static_cast<std::size_t>(t.y0) * w + t.x0) * c];
        const double* b = &hwc[(static_cast<std::size_t>(t.y0) * w + t.x1) * c];
        const double* cc = &hwc[(static_cast<std::size_t>(t.y1) * w + t.x0) * c];
        const double* d = &hwc[(static_cast<std::size_t>(t.y1) * w + t.x1) * c];
        for (int ch = 0; ch < c; ++ch) ac[ch] += t.w00 * a[ch] + t.w01 * b[ch] + t.w10 * cc[ch] + t.w11 * d[ch];
      }
    }
    double* o = out.data() + static_cast<std::size_t>(r) * c * pp;
    for (int ch = 0; ch < c; ++ch)
      for (int bin = 0; bin < pp; ++bin) o[ch * pp + bin] = stage[static_cast<std::size_t>(bin) * c + ch] * inv;
  }

  std::vector<Var> inputs{fm};
  if (box_grad.defined()) inputs.push_back(box_grad);
  return ad::make_op(std::move(out), inputs, [samples = std::move(samples), hwc = std::move(hwc), n, c, w, p, g,
                                              inv, spatial_scale, plane,
                                              with_box = box_grad.defined()](ad::Node& self) {
    Tensor* gf = self.parents[0]->requires_grad ? &self.parents[0]->grad_buffer() : nullptr;
    Tensor* gb = with_box && self.parents[1]->requires_grad ? &self.parents[1]->grad_buffer() : nullptr;
    std::vector<double> ghwc(gf ? plane * c : 0);
    const int pp = p * p;
    std::vector<double> gtr(static_cast<std::size_t>(pp) * c);  // one roi's grad, bin-major
    for (int r = 0; r < n; ++r) {
      const double* gsrc = self.grad.data() + static_cast<std::size_t>(r) * c * pp;
      for (int ch = 0; ch < c; ++ch)
        for (int k = 0; k < pp; ++k) gtr[static_cast<std::size_t>(k) * c + ch] = gsrc[ch * pp + k] * inv;
      for (int bin = 0; bin < pp; ++bin) {
        const Sample* s = &samples[(static_cast<std::size_t>(r) * pp + bin) * g * g];
        const double* go = &gtr[static_cast<std::size_t>(bin) * c];
        for (int k = 0; k < g * g; ++k) {
          const Tap& t = s[k].tap;
          if (!t.inside) continue;
          const std::size_t i00 = (static_cast<std::size_t>(t.y0) * w + t.x0) * c;
          const std::size_t i01 = (static_cast<std::size_t>(t.y0) * w + t.x1) * c;
          const std::size_t i10 = (static_cast<std::size_t>(t.y1) * w + t.x0) * c;
          const std::size_t i11 = (static_cast<std::size_t>(t.y1) * w + t.x1) * c;
          if (gf) {
            const double* __restrict gsv = go;
            double* __restrict a = ghwc.data() + i00;
            double* __restrict b = ghwc.data() + i01;
            double* __restrict cc = ghwc.data() + i10;
            double* __restrict d = ghwc.data() + i11;
            // Taps may coincide on the border, so each update is its own pass.
            for (int ch = 0; ch < c; ++ch) a[ch] += gsv[ch] * t.w00;
            for (int ch = 0; ch < c; ++ch) b[ch] += gsv[ch] * t.w01;
            for (int ch = 0; ch < c; ++ch) cc[ch] += gsv[ch] * t.w10;
            for (int ch = 0; ch < c; ++ch) d[ch] += gsv[ch] * t.w11;
          }
          if (gb) {
            double sy = 0, sx = 0;
            for (int ch = 0; ch < c; ++ch) {
              const double v00 = hwc[i00 + ch], v01 = hwc[i01 + ch], v10 = hwc[i10 + ch], v11 = hwc[i11 + ch];
              sy += go[ch] * ((1 - t.lx) * (v10 - v00) + t.lx * (v11 - v01));
              sx += go[ch] * ((1 - t.ly) * (v01 - v00) + t.ly * (v11 - v10));
            }
            sy *= t.dy_mul * spatial_scale;
            sx *= t.dx_mul * spatial_scale;
            double* gr = gb->data() + 4 * r;
            gr[0] += sx * (1 - s[k].tx);
            gr[2] += sx * s[k].tx;
            gr[1] += sy * (1 - s[k].ty);
            gr[3] += sy * s[k].ty;
          }
        }
      }
    }
    if (gf) {
      double* dst = gf->data();
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < plane; ++k) dst[ch * plane + k] += ghwc[k * c + ch];
    }
  });
}

Var split_shuffle(const Var& pooled, int k, Rng* rng, std::vector<std::vector<int>>* perms_out) {
  require(pooled.value().rank() == 4, "split_shuffle: expected [N,C,P,P]");
  const int n = pooled.shape()[0], p = pooled.shape()[2];
  require(k > 0 && p % k == 0, "split_shuffle: pooled size " + std::to_string(p) +
                                   " is not divisible by " + std::to_string(k) + " stripes");
  std::vector<std::vector<int>> perms(n);
  for (auto& perm : perms) perm = rng ? rng->permutation(k) : Rng::identity(k);
  if (perms_out) *perms_out = perms;
  if (k == 1) return pooled;
  return ad::permute_stripes(pooled, perms);
}

IdNetParams IdNetParams::init(const ModelConfig& cfg, Rng& rng) {
  IdNetParams p;
  p.conv_w = conv_param(cfg.id_channels, cfg.base_channels, 3, rng);
  p.conv_b = zero_param({cfg.id_channels});
  p.global_w = linear_param(cfg.dim, cfg.id_channels, rng);
  p.global_b = zero_param({cfg.dim});
  p.region_w = linear_param(cfg.dim, cfg.id_channels, rng);
  p.region_b = zero_param({cfg.dim});
  p.local_w = linear_param(cfg.dim, cfg.id_channels, rng);
  p.local_b = zero_param({cfg.dim});
  return p;
}

void IdNetParams::collect(const std::string& prefix, Group group, ParamList& out) const {
  out.push_back({prefix + ".conv_w", conv_w, group});
  out.push_back({prefix + ".conv_b", conv_b, group});
  out.push_back({prefix + ".global_w", global_w, group});
  out.push_back({prefix + ".global_b", global_b, group});
  out.push_back({prefix + ".region_w", region_w, group});
  out.push_back({prefix + ".region_b", region_b, group});
  out.push_back({prefix + ".local_w", local_w, group});
  out.push_back({prefix + ".local_b", local_b, group});
}

Var id_net(const Var& pooled, const IdNetParams& p) {
  return ad::relu(ad::conv2d(pooled, p.conv_w, p.conv_b, 1, 1));
}

Var MultiScaleVisualFeatures::mixed() const {
  std::vector<Var> parts{global};
  parts.insert(parts.end(), region.begin(), region.end());
  parts.insert(parts.end(), local.begin(), local.end());
  const int m = static_cast<int>(parts.size());
  Var stacked = ad::concat_rows(parts);  // part-major
  std::vector<int> order;
  for (int r = 0; r < rois; ++r)
    for (int j = 0; j < m; ++j) order.push_back(j * rois + r);
  return ad::gather_rows(stacked, order);
}

namespace {

std::vector<Var> stripe_features(const Var& trunk, int k, const Var& w, const Var& b) {
  const int p = trunk.shape()[2];
  std::vector<Var> out;
  for (int j = 0; j < k; ++j) out.push_back(linear(ad::mean_rows_range(trunk, j * p / k, (j + 1) * p / k), w, b));
  return out;
}

}  // namespace

Var global_feature(const Var& pooled, const IdNetParams& p) {
  Var trunk = id_net(pooled, p);
  return linear(ad::mean_rows_range(trunk, 0, trunk.shape()[2]), p.global_w, p.global_b);
}

MultiScaleVisualFeatures extract_multiscale(const Var& pooled, const IdNetParams& p, int region_stripes,
                                            int local_stripes, Rng* rng) {
  require(pooled.value().rank() == 4, "extract_multiscale: expected [N,C,P,P]");
  MultiScaleVisualFeatures f;
  f.rois = pooled.shape()[0];
  f.global = global_feature(pooled, p);
  f.region = stripe_features(id_net(split_shuffle(pooled, region_stripes, rng), p), region_stripes,
                             p.region_w, p.region_b);
  f.local = stripe_features(id_net(split_shuffle(pooled, local_stripes, rng), p), local_stripes,
                            p.local_w, p.local_b);
  return f;
}

Var id_forward(const Var& pooled, const IdNetParams& p) {
  return ad::l2_normalize_rows(global_feature(pooled, p));
}

}  // namespace tbps
