#include "tsnet/dataset.hpp"
#include "tsnet/rng.hpp"

namespace tsnet {

Sample flip_sample(const Sample& s) {
  Sample out = s;
  out.frame = flip_horizontal(s.frame);
  out.flow = flip_horizontal(s.flow);
  out.flow_rgb = encode_flow_rgb(out.flow, s.max_magnitude);
  out.target_main = -s.target_main;
  out.target_aux = -s.target_aux;
  return out;
}

Sample jitter_sample(const Sample& s, double brightness, double contrast) {
  Sample out = s;
  for (auto& ch : out.frame.channels) ch = (contrast * ch + brightness).max(0.0).min(255.0);
  return out;
}

Sample augment(const Sample& s, std::uint64_t seed, const AugmentConfig& cfg) {
  Rng rng(seed);
  const bool flip = rng.bernoulli(cfg.flip_probability);
  const double brightness = rng.uniform(-cfg.brightness, cfg.brightness);
  const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
  return jitter_sample(flip ? flip_sample(s) : s, brightness, contrast);
}

}  // namespace tsnet
