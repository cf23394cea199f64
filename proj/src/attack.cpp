// SPDX-License-Identifier: Apache-2.0
#include "dynvla/attack.hpp"

#include "dynvla/util.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace dynvla {

MethodSet parse_method(const std::string& label) {
  MethodSet m;
  std::stringstream ss(label);
  std::string part;
  bool pgd = false;
  int parts = 0;
  while (std::getline(ss, part, '+')) {
    std::string p;
    for (char c : part)
      if (!std::isspace(static_cast<unsigned char>(c))) p += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    ++parts;
    bool* flag = nullptr;
    if (p == "PGD") {
      pgd = true;
      continue;
    }
    if (p == "DYNVLA") flag = &m.dynvla;
    else if (p == "MI") flag = &m.mi;
    else if (p == "DI") flag = &m.di;
    else if (p == "TI") flag = &m.ti;
    else if (p == "SIT") flag = &m.sit;
    if (flag == nullptr) throw std::invalid_argument("unknown attack component '" + part + "' in '" + label + "'");
    if (*flag) throw std::invalid_argument("attack component '" + p + "' repeated in '" + label + "'");
    *flag = true;
  }
  if (parts == 0) throw std::invalid_argument("empty attack method");
  if (pgd && parts > 1) throw std::invalid_argument("PGD is the base step and cannot be combined: '" + label + "'");
  return m;
}

std::string method_label(const MethodSet& m) {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add(m.dynvla, "DYNVLA");
  add(m.mi, "MI");
  add(m.di, "DI");
  add(m.ti, "TI");
  add(m.sit, "SIT");
  return out.empty() ? "PGD" : out;
}

void AttackConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("attack config: " + msg); };
  if (!(epsilon > 0.0) || epsilon > 1.0) fail("epsilon must lie in (0, 1]");
  if (!(alpha > 0.0) || alpha > epsilon) fail("alpha must satisfy 0 < alpha <= epsilon");
  if (steps < 0) fail("steps must be non-negative");
  if (kernel_size.lo < 1 || kernel_size.hi < kernel_size.lo) fail("kernel size range is empty");
  if (odd_supports(kernel_size, kernel_size.hi).empty())
    fail("kernel size range holds no odd side");
  if (!(kernel_sigma.lo > 0.0) || kernel_sigma.hi < kernel_sigma.lo) fail("kernel sigma range must be positive and ordered");
  if (!(kernel_amplitude >= 0.0) || !std::isfinite(kernel_amplitude)) fail("kernel amplitude must be finite and >= 0");
  if (!(mi_mu >= 0.0)) fail("momentum decay must be >= 0");
  if (!(di_prob >= 0.0 && di_prob <= 1.0)) fail("DI probability must lie in [0, 1]");
  if (!(di_ratio >= 1.0)) fail("DI ratio must be >= 1");
  if (ti_kernel_side < 1 || ti_kernel_side % 2 == 0) fail("TI kernel side must be odd and positive");
  if (sit_blocks < 1) fail("SIT blocks must be positive");
  if (checkpoint_every < 0) fail("checkpoint interval must be non-negative");
}

NumericalError::NumericalError(int iteration, const std::string& what)
    : std::runtime_error("iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}

float float_budget(double epsilon) {
  float f = static_cast<float>(epsilon);
  if (static_cast<double>(f) > epsilon) f = std::nextafter(f, 0.0f);
  return f;
}

ImageTensor pgd_init(std::mt19937_64& rng, double epsilon, const ImageTensor& shape) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("epsilon must be non-negative");
  ImageTensor delta(shape.height, shape.width, shape.channels);
  if (epsilon == 0.0) return delta;
  const float budget = float_budget(epsilon);
  std::uniform_real_distribution<double> u(-epsilon, epsilon);
  for (float& v : delta.data) v = std::clamp(static_cast<float>(u(rng)), -budget, budget);
  return delta;
}

namespace {

float sign(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

void clip_to_pixels(ImageTensor& delta, const ImageTensor& image) {
  for (size_t i = 0; i < delta.size(); ++i) delta.data[i] = std::clamp(delta.data[i], -image.data[i], 1.0f - image.data[i]);
}

ImageTensor clip_sum(const ImageTensor& image, const ImageTensor& delta) {
  ImageTensor out = image;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = std::clamp(image.data[i] + delta.data[i], 0.0f, 1.0f);
  return out;
}

}  // namespace

ImageTensor pgd_step(const ImageTensor& delta, const ImageTensor& grad, double alpha, double epsilon,
                     const ImageTensor& image, int iteration) {
  if (!delta.same_shape(grad) || !delta.same_shape(image))
    throw std::invalid_argument("pgd_step: delta, gradient and image shapes differ");
  for (float g : grad.data)
    if (!std::isfinite(g)) throw NumericalError(iteration, "non-finite gradient");
  const float budget = float_budget(epsilon);
  ImageTensor out = delta;
  for (size_t i = 0; i < out.size(); ++i) {
    const double stepped = static_cast<double>(delta.data[i]) - alpha * sign(grad.data[i]);
    out.data[i] = std::clamp(static_cast<float>(stepped), -budget, budget);
  }
  clip_to_pixels(out, image);
  return out;
}

ImageTensor PixelTransform::apply(const ImageTensor& x) const {
  ImageTensor y(x.height, x.width, x.channels);
  if (identity) {
    y.data = x.data;
  } else {
    for (const Entry& e : entries) y.data[static_cast<size_t>(e.out)] += e.weight * x.data[static_cast<size_t>(e.in)];
  }
  if (!offset.empty())
    for (size_t i = 0; i < y.size(); ++i) y.data[i] += offset[i];
  if (clip01)
    for (float& v : y.data) v = std::clamp(v, 0.0f, 1.0f);
  return y;
}

ImageTensor PixelTransform::adjoint(const ImageTensor& x, const ImageTensor& grad_out) const {
  ImageTensor g = grad_out;
  if (clip01) {
    PixelTransform raw = *this;
    raw.clip01 = false;
    const ImageTensor z = raw.apply(x);
    for (size_t i = 0; i < g.size(); ++i)
      if (z.data[i] < 0.0f || z.data[i] > 1.0f) g.data[i] = 0.0f;
  }
  if (identity) return g;
  ImageTensor out(x.height, x.width, x.channels);
  for (const Entry& e : entries) out.data[static_cast<size_t>(e.in)] += e.weight * g.data[static_cast<size_t>(e.out)];
  return out;
}

namespace {

struct Tap {
  int index;
  double weight;
};

// Half-pixel-centred bilinear taps along one axis.
std::array<Tap, 2> bilinear_taps(int dst, int in_size, int out_size) {
  double src = (dst + 0.5) * static_cast<double>(in_size) / out_size - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
  const int i0 = static_cast<int>(std::floor(src));
  const int i1 = std::min(i0 + 1, in_size - 1);
  const double w1 = src - i0;
  return {Tap{i0, 1.0 - w1}, Tap{i1, w1}};
}

using SpatialWeights = std::vector<std::map<int, double>>;  // out pixel -> (in pixel -> weight)

// Spatial weights for resizing an in x in grid to out x out.
SpatialWeights resize_weights(int in, int out) {
  SpatialWeights w(static_cast<size_t>(out * out));
  for (int y = 0; y < out; ++y) {
    const auto ty = bilinear_taps(y, in, out);
    for (int x = 0; x < out; ++x) {
      const auto tx = bilinear_taps(x, in, out);
      for (const Tap& a : ty)
        for (const Tap& b : tx)
          if (a.weight * b.weight != 0.0) w[static_cast<size_t>(y * out + x)][a.index * in + b.index] += a.weight * b.weight;
    }
  }
  return w;
}

PixelTransform from_spatial(const ImageTensor& shape, const SpatialWeights& w) {
  PixelTransform t;
  t.height = shape.height;
  t.width = shape.width;
  t.channels = shape.channels;
  t.identity = false;
  const int c = shape.channels;
  for (size_t o = 0; o < w.size(); ++o)
    for (const auto& [i, weight] : w[o])
      for (int ch = 0; ch < c; ++ch)
        t.entries.push_back({static_cast<int>(o) * c + ch, i * c + ch, static_cast<float>(weight)});
  return t;
}

void require_square(const ImageTensor& shape, const char* who) {
  if (shape.height != shape.width || shape.height < 1)
    throw std::invalid_argument(std::string(who) + ": expects a non-empty square image");
}

}  // namespace

std::vector<int> di_sides(int side, double ratio) {
  std::vector<int> sides{side};
  for (int s = side + 1; static_cast<double>(s) < side * ratio; ++s) sides.push_back(s);
  return sides;
}

PixelTransform di_transform_map(const ImageTensor& shape, std::mt19937_64& rng, double prob, double ratio,
                                DiSample* sample) {
  require_square(shape, "di_transform");
  PixelTransform identity;
  identity.height = shape.height;
  identity.width = shape.width;
  identity.channels = shape.channels;
  DiSample s;
  if (!std::bernoulli_distribution(prob)(rng)) {
    if (sample != nullptr) *sample = s;
    return identity;
  }
  const int side = shape.height;
  const auto sides = di_sides(side, ratio);
  s.applied = true;
  s.resized_side = sides[std::uniform_int_distribution<size_t>(0, sides.size() - 1)(rng)];
  s.padded_side = sides.back();
  s.top = std::uniform_int_distribution<int>(0, s.padded_side - s.resized_side)(rng);
  s.left = std::uniform_int_distribution<int>(0, s.padded_side - s.resized_side)(rng);
  if (sample != nullptr) *sample = s;

  // image -> resized (r x r) -> placed on zero canvas (P x P) -> resized back (side x side)
  const SpatialWeights up = resize_weights(side, s.resized_side);
  const SpatialWeights down = resize_weights(s.padded_side, side);
  SpatialWeights total(static_cast<size_t>(side * side));
  for (size_t o = 0; o < down.size(); ++o) {
    for (const auto& [canvas, w] : down[o]) {
      const int cy = canvas / s.padded_side - s.top;
      const int cx = canvas % s.padded_side - s.left;
      if (cy < 0 || cx < 0 || cy >= s.resized_side || cx >= s.resized_side) continue;
      for (const auto& [src, w2] : up[static_cast<size_t>(cy * s.resized_side + cx)]) total[o][src] += w * w2;
    }
  }
  return from_spatial(shape, total);
}

ImageTensor di_transform(const ImageTensor& image, std::mt19937_64& rng, double prob, double ratio) {
  return di_transform_map(image, rng, prob, ratio).apply(image);
}

std::vector<double> ti_kernel(int kernel_side) {
  if (kernel_side < 1 || kernel_side % 2 == 0) throw std::invalid_argument("TI kernel side must be odd and positive");
  const double sigma = kernel_side / 3.0;
  const int r = kernel_side / 2;
  std::vector<double> k(static_cast<size_t>(kernel_side * kernel_side));
  double total = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      k[static_cast<size_t>((dy + r) * kernel_side + dx + r)] = v;
      total += v;
    }
  for (double& v : k) v /= total;
  return k;
}

ImageTensor ti_smooth(const ImageTensor& grad, int kernel_side) {
  const auto k = ti_kernel(kernel_side);
  const int r = kernel_side / 2;
  ImageTensor out(grad.height, grad.width, grad.channels);
  for (int y = 0; y < grad.height; ++y)
    for (int x = 0; x < grad.width; ++x)
      for (int c = 0; c < grad.channels; ++c) {
        double acc = 0;
        for (int dy = -r; dy <= r; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= grad.height) continue;
          for (int dx = -r; dx <= r; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= grad.width) continue;
            acc += k[static_cast<size_t>((dy + r) * kernel_side + dx + r)] * grad.at(yy, xx, c);
          }
        }
        out.at(y, x, c) = static_cast<float>(acc);
      }
  return out;
}

MomentumStep mi_update(const ImageTensor& momentum, const ImageTensor& grad, double mu) {
  if (!momentum.same_shape(grad)) throw std::invalid_argument("mi_update: momentum and gradient shapes differ");
  double l1 = 0;
  for (float g : grad.data) l1 += std::abs(static_cast<double>(g));
  MomentumStep out{momentum, momentum};
  for (size_t i = 0; i < grad.size(); ++i) {
    const double normalized = l1 > 0 ? grad.data[i] / l1 : 0.0;
    const auto m = static_cast<float>(mu * momentum.data[i] + normalized);
    out.momentum.data[i] = m;
    out.direction.data[i] = sign(m);
  }
  return out;
}

PixelTransform sit_transform_map(const ImageTensor& shape, std::mt19937_64& rng, int blocks, SitAssignment* assignment,
                                 std::optional<TileOp> forced) {
  require_square(shape, "sit_transform");
  if (blocks < 1 || shape.height % blocks != 0)
    throw std::invalid_argument("sit_transform: " + std::to_string(blocks) + " blocks do not tile a " +
                                std::to_string(shape.height) + " pixel side");
  const int tile = shape.height / blocks;
  const int c = shape.channels;
  PixelTransform t;
  t.height = shape.height;
  t.width = shape.width;
  t.channels = c;
  t.identity = false;
  t.clip01 = true;
  t.offset.assign(shape.size(), 0.0f);
  SitAssignment record;
  std::uniform_int_distribution<int> pick(0, kTileOpCount - 1);
  std::uniform_real_distribution<double> scale(0.5, 1.5);
  std::uniform_real_distribution<double> noise(-8.0 / 255.0, 8.0 / 255.0);
  for (int by = 0; by < blocks; ++by)
    for (int bx = 0; bx < blocks; ++bx) {
      const TileOp op = forced ? *forced : static_cast<TileOp>(pick(rng));
      record.ops.push_back(op);
      const float u = op == TileOp::Scale ? static_cast<float>(scale(rng)) : 1.0f;
      for (int y = 0; y < tile; ++y)
        for (int x = 0; x < tile; ++x) {
          int sy = y, sx = x;
          switch (op) {
            case TileOp::FlipH: sx = tile - 1 - x; break;
            case TileOp::FlipV: sy = tile - 1 - y; break;
            case TileOp::Rot90:
              sy = x;
              sx = tile - 1 - y;
              break;
            default: break;
          }
          for (int ch = 0; ch < c; ++ch) {
            const int out = ((by * tile + y) * shape.width + bx * tile + x) * c + ch;
            const int in = ((by * tile + sy) * shape.width + bx * tile + sx) * c + ch;
            if (op == TileOp::Zero) continue;
            t.entries.push_back({out, in, u});
            if (op == TileOp::Noise) t.offset[static_cast<size_t>(out)] = static_cast<float>(noise(rng));
          }
        }
    }
  if (assignment != nullptr) *assignment = record;
  return t;
}

ImageTensor sit_transform(const ImageTensor& image, std::mt19937_64& rng, int blocks, std::optional<TileOp> forced) {
  return sit_transform_map(image, rng, blocks, nullptr, forced).apply(image);
}

AdvExample attack(const ModelBundle& model, const ImageTensor& image, const std::string& prompt,
                  const std::string& target, const AttackConfig& cfg) {
  ModelRuntime<float> rt(model);
  return attack_with(rt, model, image, prompt, target, cfg);
}

AdvExample attack_with(ModelRuntime<float>& rt, const ModelBundle& model, const ImageTensor& image,
                       const std::string& prompt, const std::string& target, const AttackConfig& cfg) {
  cfg.validate();
  if (!model.frozen)
    throw std::invalid_argument("surrogate '" + model.spec.id + "' is not frozen; attacks need an eval-mode model");
  check_image_shape(model.spec, image);
  const Tokenizer tok = model.tokenizer();
  const std::vector<int> pid = prompt_ids(tok.tokenize(prompt));
  const std::vector<int> tid = tok.tokenize(target, true).ids;

  std::mt19937_64 init_rng(derive_seed(cfg.seed, 1));
  std::mt19937_64 kernel_rng(derive_seed(cfg.seed, 2));
  std::mt19937_64 augment_rng(derive_seed(cfg.seed, 3));

  AdvExample ex;
  ex.surrogate_id = model.spec.id;
  ex.prompt = prompt;
  ex.target_text = target;
  ex.method = method_label(cfg.method);
  ex.seed = cfg.seed;
  ex.loss_trace.reserve(static_cast<size_t>(cfg.steps));

  ImageTensor delta = pgd_init(init_rng, cfg.epsilon, image);
  clip_to_pixels(delta, image);
  ImageTensor momentum(image.height, image.width, image.channels);
  const int n = model.spec.grid_side();
  const float budget = float_budget(cfg.epsilon);

  for (int it = 0; it < cfg.steps; ++it) {
    ImageTensor x = image;
    for (size_t i = 0; i < x.size(); ++i) x.data[i] += delta.data[i];

    std::optional<KernelGrid> kernel;
    if (cfg.method.dynvla)
      kernel = build_kernel(sample_kernel_spec(kernel_rng, n, cfg.kernel_size, cfg.kernel_sigma, cfg.kernel_amplitude), n);

    std::optional<PixelTransform> di, sit;
    ImageTensor x_di = x;
    if (cfg.method.di) {
      di = di_transform_map(x, augment_rng, cfg.di_prob, cfg.di_ratio);
      x_di = di->apply(x);
    }
    ImageTensor x_in = x_di;
    if (cfg.method.sit) {
      sit = sit_transform_map(x_di, augment_rng, cfg.sit_blocks);
      x_in = sit->apply(x_di);
    }

    const LossGrad<float> lg =
        loss_and_pixel_grad(rt, x_in.to_matrix<float>(), pid, tid, kernel ? &*kernel : nullptr, true);
    if (!std::isfinite(lg.loss)) throw NumericalError(it, "non-finite loss");
    ImageTensor grad = ImageTensor::from_matrix(lg.pixel_grad, image.channels);
    if (sit) grad = sit->adjoint(x_di, grad);
    if (di) grad = di->adjoint(x, grad);
    if (cfg.method.ti) grad = ti_smooth(grad, cfg.ti_kernel_side);
    if (cfg.method.mi) {
      MomentumStep m = mi_update(momentum, grad, cfg.mi_mu);
      momentum = std::move(m.momentum);
      grad = std::move(m.direction);
    }
    if (cfg.ascent)
      for (float& g : grad.data) g = -g;

    delta = pgd_step(delta, grad, cfg.alpha, cfg.epsilon, image, it);
    ex.loss_trace.push_back(lg.loss);

    if (cfg.check_invariants) {
      for (size_t i = 0; i < delta.size(); ++i) {
        const double v = static_cast<double>(image.data[i]) + delta.data[i];
        if (std::abs(static_cast<double>(delta.data[i])) > cfg.epsilon + 1e-9 || std::abs(delta.data[i]) > budget ||
            v < -1e-7 || v > 1.0 + 1e-7)
          throw InvariantViolation("iteration " + std::to_string(it) + ": perturbation left the feasible set");
      }
    }
    if (cfg.on_progress && (it + 1) % kProgressInterval == 0) cfg.on_progress(it + 1, lg.loss);
    if (cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0)
      ex.checkpoints.emplace_back(it + 1, clip_sum(image, delta));
  }
  ex.delta = delta;
  ex.adversarial_image = clip_sum(image, delta);
  return ex;
}

}  // namespace dynvla
