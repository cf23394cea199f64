// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/autodiff.hpp"
#include "dynvla/image.hpp"
#include "dynvla/perturbation.hpp"
#include "dynvla/tokenizer.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dynvla {

enum class Family { CrossAttn, MlpProj };

std::string family_name(Family f);
Family parse_family(const std::string& s);

/// Shape error for images or token grids that do not fit a model.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelSpec {
  std::string id;
  Family family = Family::CrossAttn;
  int image_side = 32;
  int channels = 3;
  int patch = 4;
  int vision_depth = 2;
  int connector_depth = 1;
  int lm_depth = 2;
  int d_vision = 32;
  int d_lm = 32;
  int vision_heads = 2;
  int heads = 2;
  std::optional<int> query_tokens;  // CrossAttn only
  int mlp_ratio = 2;
  int max_text = 40;
  /// Index of the connector cross-attention layer (CrossAttn) or LM self-attention
  /// layer (MlpProj) that receives the attention kernel.
  int injection_layer = 0;
  std::string alphabet = std::string(Tokenizer::kDefaultAlphabet);
  std::uint64_t init_seed = 1;

  int grid_side() const { return image_side / patch; }
  int visual_tokens() const { return grid_side() * grid_side(); }
  /// Rows the connector hands to the language model.
  int prefix_tokens() const { return family == Family::CrossAttn ? query_tokens.value_or(0) : visual_tokens(); }
  int max_positions() const { return prefix_tokens() + max_text; }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

struct ModelBundle {
  ModelSpec spec;
  std::map<std::string, Matrix<float>> parameters;
  std::string injection_site;
  bool frozen = false;

  Tokenizer tokenizer() const { return Tokenizer(spec.alphabet); }
  size_t parameter_count() const;
};

/// Fresh parameters drawn from `spec.init_seed`.
ModelBundle init_model(const ModelSpec& spec);
std::string injection_site_for(const ModelSpec& spec);

struct VisualTokens {
  int grid_side = 0;
  Matrix<double> embeddings;  // n^2 x d_vision
  GridLayout layout;
};

struct ConnectorOutput {
  Matrix<double> embeddings;  // k x d_lm
  /// MlpProj only: kernel to be applied to the LM self-attention rows instead.
  std::optional<KernelSpec> deferred_kernel;
};

/// Per-family forward passes on a Graph. Parameters are converted to T once.
template <typename T>
class ModelRuntime {
 public:
  explicit ModelRuntime(const ModelBundle& bundle);

  const ModelSpec& spec() const { return spec_; }

  /// Parameters whose names satisfy `pred` accumulate gradients into grads().
  template <typename Pred>
  void set_trainable(Pred pred) {
    for (size_t i = 0; i < names_.size(); ++i) {
      trainable_[i] = pred(names_[i]);
      grads_[i] = Matrix<T>::Zero(values_[i].rows(), values_[i].cols());
    }
  }
  void zero_grads();
  std::vector<Matrix<T>>& values() { return values_; }
  std::vector<Matrix<T>>& grads() { return grads_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<bool>& trainable() const { return trainable_; }
  /// Writes the current values back into a bundle's float parameters.
  void store(ModelBundle& bundle) const;

  /// Diagnostics: receives every attention probability matrix right after kernel injection.
  std::function<void(const Matrix<T>&)> on_injected_attention;

  /// One forward pass bound to a single graph.
  class Pass {
   public:
    Pass(ModelRuntime& rt, Graph<T>& g);

    Var param(const std::string& name);
    /// image: H x (W * C) matrix node.
    Var encode(Var image);
    /// Connector rows in LM space; the kernel is applied here only for CrossAttn.
    Var connect(Var visual, const KernelGrid* kernel);
    /// Final hidden states of the LM over [prefix ++ text_ids]; the kernel is applied
    /// here only for MlpProj.
    Var lm_hidden(Var prefix, const std::vector<int>& text_ids, const KernelGrid* kernel);
    Var logits(Var hidden_rows);

   private:
    Var block(const std::string& prefix, Var x, int heads, bool causal,
              const AttentionInjection<T>* inj);
    Var attention(const std::string& prefix, Var q_in, Var kv_in, int heads, bool causal,
                  const AttentionInjection<T>* inj);
    Var mlp(const std::string& prefix, Var x);
    Var linear(const std::string& prefix, Var x);

    ModelRuntime& rt_;
    Graph<T>& g_;
    std::vector<Var> bound_;
  };

 private:
  friend class Pass;
  ModelSpec spec_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, size_t> index_;
  std::vector<Matrix<T>> values_;
  std::vector<Matrix<T>> grads_;
  std::vector<bool> trainable_;
};

extern template class ModelRuntime<float>;
extern template class ModelRuntime<double>;

/// Token ids fed to the LM for a prompt: BOS, prompt characters, SEP.
std::vector<int> prompt_ids(const TokenSequence& prompt);

void check_image_shape(const ModelSpec& spec, const ImageTensor& image);

/// Teacher-forced loss and its gradient with respect to every image pixel.
template <typename T>
struct LossGrad {
  T loss = 0;
  Matrix<T> pixel_grad;  // H x (W * C), same layout as ImageTensor::to_matrix
};

/// Loss on `image_matrix` (already transformed / perturbed) with optional kernel.
template <typename T>
LossGrad<T> loss_and_pixel_grad(ModelRuntime<T>& rt, const Matrix<T>& image_matrix, const std::vector<int>& prompt,
                                const std::vector<int>& target, const KernelGrid* kernel, bool want_grad = true);

VisualTokens encode_image(const ModelBundle& model, const ImageTensor& image);
ConnectorOutput connect(const ModelBundle& model, const VisualTokens& visual, const std::optional<KernelSpec>& kernel);
/// Mean NLL of `target` ids (caller appends EOS when it should be scored).
double lm_loss(const ModelBundle& model, const ImageTensor& image, const TokenSequence& prompt,
               const TokenSequence& target, const std::optional<KernelSpec>& kernel = std::nullopt);
/// Greedy decode without any perturbation; stops at EOS or after max_len tokens.
TokenSequence generate(const ModelBundle& model, const ImageTensor& image, const TokenSequence& prompt, int max_len);

/// Greedy decoding against a prepared runtime (no parameter conversion per call).
template <typename T>
TokenSequence generate_with(ModelRuntime<T>& rt, const Tokenizer& tok, const ImageTensor& image,
                            const TokenSequence& prompt, int max_len);

}  // namespace dynvla
