// SPDX-License-Identifier: Apache-2.0
#include "dynvla/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace dynvla {

std::string family_name(Family f) { return f == Family::CrossAttn ? "CROSS_ATTN" : "MLP_PROJ"; }

Family parse_family(const std::string& s) {
  if (s == "CROSS_ATTN") return Family::CrossAttn;
  if (s == "MLP_PROJ") return Family::MlpProj;
  throw std::invalid_argument("unknown model family '" + s + "' (expected CROSS_ATTN or MLP_PROJ)");
}

void ModelSpec::validate() const {
  auto fail = [this](const std::string& why) { throw std::invalid_argument("model spec '" + id + "': " + why); };
  if (patch < 1 || image_side % patch != 0) fail("image side must be divisible by the patch size");
  if (channels < 1) fail("channels must be positive");
  if (vision_depth < 1 || lm_depth < 1) fail("vision and LM depth must be at least 1");
  if (d_vision < 1 || d_lm < 1) fail("embedding widths must be positive");
  if (vision_heads < 1 || d_vision % vision_heads != 0) fail("d_vision must be divisible by vision_heads");
  if (heads < 1 || d_lm % heads != 0) fail("d_lm must be divisible by heads");
  if (mlp_ratio < 1) fail("mlp_ratio must be positive");
  if (max_text < 4) fail("max_text too small");
  if (family == Family::CrossAttn) {
    if (!query_tokens || *query_tokens < 1) fail("CROSS_ATTN requires query_tokens >= 1");
    if (connector_depth < 1) fail("CROSS_ATTN requires connector_depth >= 1");
    if (injection_layer < 0 || injection_layer >= connector_depth) fail("injection_layer outside the connector");
  } else {
    if (query_tokens) fail("query_tokens is only valid for CROSS_ATTN");
    if (injection_layer < 0 || injection_layer >= lm_depth) fail("injection_layer outside the language model");
  }
  Tokenizer tok(alphabet);
  (void)tok;
}

std::string injection_site_for(const ModelSpec& spec) {
  std::ostringstream os;
  if (spec.family == Family::CrossAttn)
    os << "connector.layer" << spec.injection_layer << ".attn";
  else
    os << "lm.block" << spec.injection_layer << ".attn";
  return os.str();
}

size_t ModelBundle::parameter_count() const {
  size_t n = 0;
  for (const auto& [name, m] : parameters) n += static_cast<size_t>(m.size());
  return n;
}

namespace {

struct Initializer {
  std::mt19937_64 rng;
  std::vector<std::pair<std::string, Matrix<float>>> out;

  void normal(const std::string& name, int rows, int cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<float> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng));
    out.emplace_back(name, std::move(m));
  }
  void constant(const std::string& name, int rows, int cols, float v) {
    out.emplace_back(name, Matrix<float>::Constant(rows, cols, v));
  }
  void linear(const std::string& name, int in, int outdim, double gain = 1.0) {
    normal(name + ".w", in, outdim, gain / std::sqrt(static_cast<double>(in)));
    constant(name + ".b", 1, outdim, 0.0f);
  }
  void layer_norm(const std::string& name, int d) {
    constant(name + ".g", 1, d, 1.0f);
    constant(name + ".b", 1, d, 0.0f);
  }
  void attention(const std::string& name, int d_q, int d_kv, int d, int depth) {
    normal(name + ".wq", d_q, d, 1.0 / std::sqrt(static_cast<double>(d_q)));
    normal(name + ".wk", d_kv, d, 1.0 / std::sqrt(static_cast<double>(d_kv)));
    normal(name + ".wv", d_kv, d, 1.0 / std::sqrt(static_cast<double>(d_kv)));
    linear(name + ".out", d, d, 1.0 / std::sqrt(2.0 * depth));
  }
  void mlp(const std::string& name, int d, int ratio, int depth) {
    linear(name + ".fc1", d, d * ratio);
    linear(name + ".fc2", d * ratio, d, 1.0 / std::sqrt(2.0 * depth));
  }
  void block(const std::string& name, int d, int ratio, int depth) {
    layer_norm(name + ".ln1", d);
    attention(name + ".attn", d, d, d, depth);
    layer_norm(name + ".ln2", d);
    mlp(name + ".mlp", d, ratio, depth);
  }
};

}  // namespace

ModelBundle init_model(const ModelSpec& spec) {
  spec.validate();
  const int n2 = spec.visual_tokens();
  const int patch_dim = spec.patch * spec.patch * spec.channels;
  const int vocab = Tokenizer(spec.alphabet).vocab_size();
  Initializer init{std::mt19937_64(spec.init_seed), {}};

  init.linear("vision.patch", patch_dim, spec.d_vision);
  init.normal("vision.pos", n2, spec.d_vision, 0.1);
  for (int i = 0; i < spec.vision_depth; ++i)
    init.block("vision.block" + std::to_string(i), spec.d_vision, spec.mlp_ratio, spec.vision_depth);
  init.layer_norm("vision.ln_f", spec.d_vision);

  if (spec.family == Family::CrossAttn) {
    init.normal("connector.queries", *spec.query_tokens, spec.d_lm, 0.2);
    for (int i = 0; i < spec.connector_depth; ++i) {
      const std::string p = "connector.layer" + std::to_string(i);
      init.layer_norm(p + ".ln_q", spec.d_lm);
      init.layer_norm(p + ".ln_kv", spec.d_vision);
      init.attention(p + ".attn", spec.d_lm, spec.d_vision, spec.d_lm, spec.connector_depth);
      init.layer_norm(p + ".ln2", spec.d_lm);
      init.mlp(p + ".mlp", spec.d_lm, spec.mlp_ratio, spec.connector_depth);
    }
    init.layer_norm("connector.ln_f", spec.d_lm);
  } else {
    init.linear("connector.fc1", spec.d_vision, spec.d_lm);
    init.linear("connector.fc2", spec.d_lm, spec.d_lm);
  }

  init.normal("lm.tok", vocab, spec.d_lm, 0.2);
  init.normal("lm.pos", spec.max_positions(), spec.d_lm, 0.1);
  for (int i = 0; i < spec.lm_depth; ++i)
    init.block("lm.block" + std::to_string(i), spec.d_lm, spec.mlp_ratio, spec.lm_depth);
  init.layer_norm("lm.ln_f", spec.d_lm);
  init.linear("lm.head", spec.d_lm, vocab);

  ModelBundle b;
  b.spec = spec;
  for (auto& [name, m] : init.out) b.parameters.emplace(name, std::move(m));
  b.injection_site = injection_site_for(spec);
  return b;
}

// ---------------------------------------------------------------------------

template <typename T>
ModelRuntime<T>::ModelRuntime(const ModelBundle& bundle) : spec_(bundle.spec) {
  for (const auto& [name, m] : bundle.parameters) {
    index_.emplace(name, names_.size());
    names_.push_back(name);
    values_.push_back(m.template cast<T>());
  }
  grads_.resize(values_.size());
  trainable_.assign(values_.size(), false);
}

template <typename T>
void ModelRuntime<T>::zero_grads() {
  for (size_t i = 0; i < grads_.size(); ++i)
    if (trainable_[i]) grads_[i].setZero();
}

template <typename T>
void ModelRuntime<T>::store(ModelBundle& bundle) const {
  for (size_t i = 0; i < names_.size(); ++i) bundle.parameters.at(names_[i]) = values_[i].template cast<float>();
}

template <typename T>
ModelRuntime<T>::Pass::Pass(ModelRuntime& rt, Graph<T>& g) : rt_(rt), g_(g), bound_(rt.values_.size()) {}

template <typename T>
Var ModelRuntime<T>::Pass::param(const std::string& name) {
  auto it = rt_.index_.find(name);
  if (it == rt_.index_.end()) throw std::out_of_range("model has no parameter '" + name + "'");
  const size_t i = it->second;
  if (!bound_[i].valid())
    bound_[i] = g_.parameter(&rt_.values_[i], rt_.trainable_[i] ? &rt_.grads_[i] : nullptr);
  return bound_[i];
}

template <typename T>
Var ModelRuntime<T>::Pass::linear(const std::string& prefix, Var x) {
  return g_.add_row(g_.matmul(x, param(prefix + ".w")), param(prefix + ".b"));
}

template <typename T>
Var ModelRuntime<T>::Pass::mlp(const std::string& prefix, Var x) {
  return linear(prefix + ".fc2", g_.gelu(linear(prefix + ".fc1", x)));
}

template <typename T>
Var ModelRuntime<T>::Pass::attention(const std::string& prefix, Var q_in, Var kv_in, int heads, bool causal,
                                     const AttentionInjection<T>* inj) {
  Var q = g_.matmul(q_in, param(prefix + ".wq"));
  Var k = g_.matmul(kv_in, param(prefix + ".wk"));
  Var v = g_.matmul(kv_in, param(prefix + ".wv"));
  const int d = static_cast<int>(g_.value(q).cols());
  const int dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : g_.slice_cols(q, h * dh, dh);
    Var kh = heads == 1 ? k : g_.slice_cols(k, h * dh, dh);
    Var vh = heads == 1 ? v : g_.slice_cols(v, h * dh, dh);
    Var probs = g_.softmax_rows(g_.scale(g_.matmul_nt(qh, kh), scale), causal, 0);
    if (inj) {
      probs = g_.inject_attention(probs, *inj);
      if (rt_.on_injected_attention) rt_.on_injected_attention(g_.value(probs));
    }
    outs.push_back(g_.matmul(probs, vh));
  }
  Var merged = heads == 1 ? outs[0] : g_.concat_cols(outs);
  return linear(prefix + ".out", merged);
}

template <typename T>
Var ModelRuntime<T>::Pass::block(const std::string& prefix, Var x, int heads, bool causal,
                                 const AttentionInjection<T>* inj) {
  Var h = g_.layer_norm(x, param(prefix + ".ln1.g"), param(prefix + ".ln1.b"));
  x = g_.add(x, attention(prefix + ".attn", h, h, heads, causal, inj));
  Var h2 = g_.layer_norm(x, param(prefix + ".ln2.g"), param(prefix + ".ln2.b"));
  return g_.add(x, mlp(prefix + ".mlp", h2));
}

template <typename T>
Var ModelRuntime<T>::Pass::encode(Var image) {
  const ModelSpec& s = rt_.spec_;
  const auto& img = g_.value(image);
  if (img.rows() != s.image_side || img.cols() != s.image_side * s.channels)
    throw ShapeError("image matrix has shape " + std::to_string(img.rows()) + "x" + std::to_string(img.cols()) +
                     ", expected " + std::to_string(s.image_side) + "x" + std::to_string(s.image_side * s.channels));
  const int n = s.grid_side();
  const int p = s.patch;
  const int c = s.channels;
  const int cols = static_cast<int>(img.cols());
  // patch (py, px) -> row py * n + px; within a patch, (dy, dx, ch) row-major
  std::vector<int> src;
  src.reserve(static_cast<size_t>(n * n * p * p * c));
  for (int py = 0; py < n; ++py)
    for (int px = 0; px < n; ++px)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int ch = 0; ch < c; ++ch) src.push_back((py * p + dy) * cols + (px * p + dx) * c + ch);
  Matrix<T> patches(n * n, p * p * c);
  for (size_t i = 0; i < src.size(); ++i) patches.data()[i] = img.data()[src[i]];
  const auto rows = img.rows();
  Var x = g_.custom(std::move(patches), {image}, [graph = &g_, image, src = std::move(src), rows, cols](const Matrix<T>& g, const Matrix<T>&) {
    Matrix<T> d = Matrix<T>::Zero(rows, cols);
    for (size_t i = 0; i < src.size(); ++i) d.data()[src[i]] += g.data()[i];
    graph->accumulate(image, d);
  });
  x = g_.add(linear("vision.patch", x), param("vision.pos"));
  for (int i = 0; i < s.vision_depth; ++i) x = block("vision.block" + std::to_string(i), x, s.vision_heads, false, nullptr);
  return g_.layer_norm(x, param("vision.ln_f.g"), param("vision.ln_f.b"));
}

template <typename T>
Var ModelRuntime<T>::Pass::connect(Var visual, const KernelGrid* kernel) {
  const ModelSpec& s = rt_.spec_;
  if (g_.value(visual).rows() != s.visual_tokens())
    throw ShapeError("connector expects " + std::to_string(s.visual_tokens()) + " visual tokens, got " +
                     std::to_string(g_.value(visual).rows()));
  if (s.family == Family::MlpProj) return linear("connector.fc2", g_.gelu(linear("connector.fc1", visual)));

  std::optional<AttentionInjection<T>> inj;
  if (kernel) {
    if (kernel->n != s.grid_side()) throw ShapeError("kernel grid side does not match the visual token grid");
    inj = make_injection<T>(*kernel, GridLayout{s.grid_side()}, 0);
  }
  Var q = param("connector.queries");
  for (int i = 0; i < s.connector_depth; ++i) {
    const std::string p = "connector.layer" + std::to_string(i);
    Var hq = g_.layer_norm(q, param(p + ".ln_q.g"), param(p + ".ln_q.b"));
    Var hkv = g_.layer_norm(visual, param(p + ".ln_kv.g"), param(p + ".ln_kv.b"));
    const AttentionInjection<T>* site = (inj && i == s.injection_layer) ? &*inj : nullptr;
    q = g_.add(q, attention(p + ".attn", hq, hkv, s.heads, false, site));
    Var h2 = g_.layer_norm(q, param(p + ".ln2.g"), param(p + ".ln2.b"));
    q = g_.add(q, mlp(p + ".mlp", h2));
  }
  return g_.layer_norm(q, param("connector.ln_f.g"), param("connector.ln_f.b"));
}

template <typename T>
Var ModelRuntime<T>::Pass::lm_hidden(Var prefix, const std::vector<int>& text_ids, const KernelGrid* kernel) {
  const ModelSpec& s = rt_.spec_;
  const int k = static_cast<int>(g_.value(prefix).rows());
  const int len = k + static_cast<int>(text_ids.size());
  if (len > s.max_positions())
    throw ShapeError("sequence of " + std::to_string(len) + " positions exceeds the model limit of " +
                     std::to_string(s.max_positions()));
  Var tok = g_.gather_rows(param("lm.tok"), text_ids);
  const Var parts[] = {prefix, tok};
  Var x = g_.concat_rows(parts);
  x = g_.add(x, g_.slice_rows(param("lm.pos"), 0, len));

  std::optional<AttentionInjection<T>> inj;
  if (kernel && s.family == Family::MlpProj) {
    if (kernel->n != s.grid_side()) throw ShapeError("kernel grid side does not match the visual token grid");
    inj = make_injection<T>(*kernel, GridLayout{s.grid_side()}, 0, true, 0);
  }
  for (int i = 0; i < s.lm_depth; ++i) {
    const AttentionInjection<T>* site = (inj && i == s.injection_layer) ? &*inj : nullptr;
    x = block("lm.block" + std::to_string(i), x, s.heads, true, site);
  }
  return g_.layer_norm(x, param("lm.ln_f.g"), param("lm.ln_f.b"));
}

template <typename T>
Var ModelRuntime<T>::Pass::logits(Var hidden_rows) {
  return linear("lm.head", hidden_rows);
}

template class ModelRuntime<float>;
template class ModelRuntime<double>;

// ---------------------------------------------------------------------------

std::vector<int> prompt_ids(const TokenSequence& prompt) {
  std::vector<int> ids;
  ids.reserve(prompt.ids.size() + 2);
  ids.push_back(Tokenizer::kBos);
  ids.insert(ids.end(), prompt.ids.begin(), prompt.ids.end());
  ids.push_back(Tokenizer::kSep);
  return ids;
}

void check_image_shape(const ModelSpec& spec, const ImageTensor& image) {
  if (image.height != spec.image_side || image.width != spec.image_side || image.channels != spec.channels)
    throw ShapeError("expected a " + std::to_string(spec.image_side) + "x" + std::to_string(spec.image_side) + "x" +
                     std::to_string(spec.channels) + " image, got " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + "x" + std::to_string(image.channels));
  if (image.data.size() != static_cast<size_t>(image.height * image.width * image.channels))
    throw ShapeError("image buffer size does not match its declared shape");
}

template <typename T>
LossGrad<T> loss_and_pixel_grad(ModelRuntime<T>& rt, const Matrix<T>& image_matrix, const std::vector<int>& prompt,
                                const std::vector<int>& target, const KernelGrid* kernel, bool want_grad) {
  if (target.empty()) throw std::invalid_argument("target sequence is empty");
  Graph<T> g;
  typename ModelRuntime<T>::Pass pass(rt, g);
  Var img = g.leaf(image_matrix, want_grad);
  const bool cross = rt.spec().family == Family::CrossAttn;
  Var prefix = pass.connect(pass.encode(img), cross ? kernel : nullptr);
  std::vector<int> text = prompt;
  text.insert(text.end(), target.begin(), target.end() - 1);
  Var hidden = pass.lm_hidden(prefix, text, cross ? nullptr : kernel);
  const int k = static_cast<int>(g.value(prefix).rows());
  const int first = k + static_cast<int>(prompt.size()) - 1;
  Var logits = pass.logits(g.slice_rows(hidden, first, static_cast<int>(target.size())));
  Var loss = g.cross_entropy(logits, target);
  LossGrad<T> out;
  out.loss = g.scalar(loss);
  if (want_grad) {
    g.backward(loss);
    out.pixel_grad = g.grad(img);
  }
  return out;
}

template LossGrad<float> loss_and_pixel_grad(ModelRuntime<float>&, const Matrix<float>&, const std::vector<int>&,
                                             const std::vector<int>&, const KernelGrid*, bool);
template LossGrad<double> loss_and_pixel_grad(ModelRuntime<double>&, const Matrix<double>&, const std::vector<int>&,
                                              const std::vector<int>&, const KernelGrid*, bool);

VisualTokens encode_image(const ModelBundle& model, const ImageTensor& image) {
  check_image_shape(model.spec, image);
  ModelRuntime<double> rt(model);
  Graph<double> g;
  ModelRuntime<double>::Pass pass(rt, g);
  Var v = pass.encode(g.leaf(image.to_matrix<double>()));
  VisualTokens out;
  out.grid_side = model.spec.grid_side();
  out.embeddings = g.value(v);
  out.layout = GridLayout{out.grid_side};
  return out;
}

ConnectorOutput connect(const ModelBundle& model, const VisualTokens& visual, const std::optional<KernelSpec>& kernel) {
  const int n = model.spec.grid_side();
  if (visual.grid_side != n || visual.embeddings.rows() != n * n)
    throw ShapeError("visual tokens do not match the model's " + std::to_string(n) + "x" + std::to_string(n) + " grid");
  std::optional<KernelGrid> grid;
  if (kernel) grid = build_kernel(*kernel, n);
  ModelRuntime<double> rt(model);
  Graph<double> g;
  ModelRuntime<double>::Pass pass(rt, g);
  const bool cross = model.spec.family == Family::CrossAttn;
  Var out = pass.connect(g.leaf(visual.embeddings), cross && grid ? &*grid : nullptr);
  ConnectorOutput co;
  co.embeddings = g.value(out);
  if (!cross && kernel) co.deferred_kernel = kernel;
  return co;
}

double lm_loss(const ModelBundle& model, const ImageTensor& image, const TokenSequence& prompt,
               const TokenSequence& target, const std::optional<KernelSpec>& kernel) {
  if (target.ids.empty()) throw std::invalid_argument("target sequence is empty");
  check_image_shape(model.spec, image);
  std::optional<KernelGrid> grid;
  if (kernel) grid = build_kernel(*kernel, model.spec.grid_side());
  ModelRuntime<double> rt(model);
  return loss_and_pixel_grad<double>(rt, image.to_matrix<double>(), prompt_ids(prompt), target.ids,
                                     grid ? &*grid : nullptr, false)
      .loss;
}

template <typename T>
TokenSequence generate_with(ModelRuntime<T>& rt, const Tokenizer& tok, const ImageTensor& image,
                            const TokenSequence& prompt, int max_len) {
  if (max_len < 1) throw std::invalid_argument("max_len must be at least 1");
  check_image_shape(rt.spec(), image);
  Matrix<T> prefix_value;
  {
    Graph<T> g;
    typename ModelRuntime<T>::Pass pass(rt, g);
    prefix_value = g.value(pass.connect(pass.encode(g.leaf(image.template to_matrix<T>())), nullptr));
  }
  std::vector<int> text = prompt_ids(prompt);
  std::vector<int> produced;
  const int limit = std::min(max_len, rt.spec().max_positions() - static_cast<int>(prefix_value.rows()) -
                                          static_cast<int>(text.size()) + 1);
  for (int step = 0; step < limit; ++step) {
    Graph<T> g;
    typename ModelRuntime<T>::Pass pass(rt, g);
    Var hidden = pass.lm_hidden(g.leaf(prefix_value), text, nullptr);
    const int last = static_cast<int>(g.value(hidden).rows()) - 1;
    const auto& logits = g.value(pass.logits(g.slice_rows(hidden, last, 1)));
    Eigen::Index best = 0;
    logits.row(0).maxCoeff(&best);
    const int id = static_cast<int>(best);
    if (id == Tokenizer::kEos) break;
    produced.push_back(id);
    text.push_back(id);
  }
  TokenSequence out;
  out.ids = produced;
  out.text = tok.detokenize(produced);
  return out;
}

template TokenSequence generate_with(ModelRuntime<float>&, const Tokenizer&, const ImageTensor&, const TokenSequence&, int);
template TokenSequence generate_with(ModelRuntime<double>&, const Tokenizer&, const ImageTensor&, const TokenSequence&, int);

TokenSequence generate(const ModelBundle& model, const ImageTensor& image, const TokenSequence& prompt, int max_len) {
  ModelRuntime<float> rt(model);
  return generate_with(rt, model.tokenizer(), image, prompt, max_len);
}

}  // namespace dynvla
