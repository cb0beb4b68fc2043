#pragma once

#include <algorithm>
#include <cmath>

#include "grappa/config.hpp"
#include "grappa/image.hpp"
#include "grappa/rng.hpp"

namespace grappa {

// Minimal self-supervised augmentation set: random area crop resized back to
// the input size, horizontal flip, brightness/contrast jitter. All randomness
// comes from the caller's Rng, so a pair of views is two calls with two
// independent streams.
inline Image augment(const Image& src, const AugmentConfig& cfg, Rng& rng) {
  Image out = src;

  // Random resized crop. Aspect ratio is kept square to stay friendly to
  // tiny images; area is uniform in [min_area, max_area].
  if (cfg.min_area < 1.0 || cfg.max_area < 1.0) {
    const double area = cfg.min_area + (cfg.max_area - cfg.min_area) * rng.uniform();
    const double side = std::sqrt(area);
    int ch_ = std::max(1, static_cast<int>(std::lround(side * src.h)));
    int cw = std::max(1, static_cast<int>(std::lround(side * src.w)));
    ch_ = std::min(ch_, src.h);
    cw = std::min(cw, src.w);
    const int top = (src.h == ch_) ? 0 : static_cast<int>(rng.uniform_int(src.h - ch_ + 1));
    const int left = (src.w == cw) ? 0 : static_cast<int>(rng.uniform_int(src.w - cw + 1));
    out = resize_bilinear(crop(out, top, left, ch_, cw), src.h, src.w);
  }

  if (cfg.hflip && rng.uniform() < 0.5) out = hflip(out);

  if (cfg.jitter > 0.0) {
    const float brightness = static_cast<float>((rng.uniform() * 2.0 - 1.0) * cfg.jitter);
    const float contrast = static_cast<float>(1.0 + (rng.uniform() * 2.0 - 1.0) * cfg.jitter);
    double mean = 0.0;
    for (float v : out.pix) mean += v;
    const float mu = out.pix.empty() ? 0.f : static_cast<float>(mean / out.pix.size());
    for (float& v : out.pix)
      v = std::clamp((v - mu) * contrast + mu + brightness, 0.f, 1.f);
  }
  return out;
}

// The do-nothing policy: augment() with it returns the input unchanged.
inline AugmentConfig identity_augment() {
  AugmentConfig cfg;
  cfg.min_area = 1.0;
  cfg.max_area = 1.0;
  cfg.hflip = false;
  cfg.jitter = 0.0;
  return cfg;
}

}  // namespace grappa
