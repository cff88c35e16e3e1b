#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace xsl {

struct ModelConfig {
  int phone_dim = 0;
  int visual_dim = 0;
  int hidden_dim = 32;     // H: frame/context/object latent width
  int embed_dim = 24;      // E: shared audiovisual embedding width
  int codebook_size = 32;  // V: quantizer codes for masked prediction
  int context_window = 5;  // w: bidirectional local mixing window (odd)
  void validate() const;
};

/// All trainable tensors. The same struct doubles as a gradient accumulator
/// and as Adam moment storage; for_each fixes the canonical tensor order used
/// by the optimizer, checkpoints and the finite-difference checker.
struct ParamSet {
  // audio frame encoder: phone_dim -> H -> H
  Eigen::MatrixXd enc_w1, enc_w2;
  Eigen::VectorXd enc_b1, enc_b2;
  // learned replacement vector for masked frame latents
  Eigen::VectorXd mask_vector;
  // local context mixer: one H x H matrix per window offset, plus bias
  std::vector<Eigen::MatrixXd> ctx_w;
  Eigen::VectorXd ctx_b;
  // learned-query attention pooling over context frames
  Eigen::VectorXd attn_query;
  // audio projection head: H -> H -> E
  Eigen::MatrixXd aproj_w1, aproj_w2;
  Eigen::VectorXd aproj_b1, aproj_b2;
  // quantizer codebook, one code per column: H x V
  Eigen::MatrixXd codebook;
  // visual object encoder: visual_dim -> H -> H
  Eigen::MatrixXd vis_w1, vis_w2;
  Eigen::VectorXd vis_b1, vis_b2;
  // visual projection head: H -> H -> E
  Eigen::MatrixXd vproj_w1, vproj_w2;
  Eigen::VectorXd vproj_b1, vproj_b2;

  template <class F>
  void for_each(F&& f) {
    f("enc_w1", enc_w1);
    f("enc_b1", enc_b1);
    f("enc_w2", enc_w2);
    f("enc_b2", enc_b2);
    f("mask_vector", mask_vector);
    for (std::size_t i = 0; i < ctx_w.size(); ++i)
      f("ctx_w." + std::to_string(i), ctx_w[i]);
    f("ctx_b", ctx_b);
    f("attn_query", attn_query);
    f("aproj_w1", aproj_w1);
    f("aproj_b1", aproj_b1);
    f("aproj_w2", aproj_w2);
    f("aproj_b2", aproj_b2);
    f("codebook", codebook);
    f("vis_w1", vis_w1);
    f("vis_b1", vis_b1);
    f("vis_w2", vis_w2);
    f("vis_b2", vis_b2);
    f("vproj_w1", vproj_w1);
    f("vproj_b1", vproj_b1);
    f("vproj_w2", vproj_w2);
    f("vproj_b2", vproj_b2);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<ParamSet*>(this)->for_each(
        [&](const std::string& name, const auto& t) { f(name, t); });
  }

  bool all_finite() const;
  long long coefficient_count() const;
};

ParamSet init_params(const ModelConfig& config, std::uint64_t seed);
ParamSet zeros_like(const ParamSet& shape);

/// Adds iid Gaussian noise to every coefficient (gradient checking uses this
/// so no tensor sits at an exactly-zero stationary point).
void perturb_params(ParamSet& params, double sd, std::uint64_t seed);

struct TrainConfig {
  double alpha = 0.5;          // audiovisual loss weight
  double temperature = 0.1;    // softmax temperature for both contrastive losses
  double learning_rate = 1e-4;
  double warmup_fraction = 0.1;
  int epochs = 0;
  int batch_size = 16;
  double mask_fraction = 0.3;  // fraction of frames covered by mask spans
  int mask_span = 3;           // frames per mask span
  int n_negatives = 10;        // distractor codes per masked position
  std::uint64_t seed = 0;
  bool freeze_visual_encoder = false;
  int validate_every = 10;     // epochs between validation probes
  void validate() const;
};

enum class Stage { kAuditoryOnly, kAudiovisual };

struct LossBreakdown {
  double loss_aud_r = 0.0;
  double loss_aud_d = 0.0;
  double loss_aud = 0.0;  // loss_aud_r + 0.1 * loss_aud_d
  std::optional<double> loss_av;
  double alpha = 0.0;
  double loss_total = 0.0;  // alpha*loss_av + (1-alpha)*loss_aud
};

/// Combines the loss terms exactly per the LossBreakdown identities. With no
/// audiovisual term (auditory-only stage) the total is loss_aud.
LossBreakdown total_loss(double loss_aud_r, double loss_aud_d, std::optional<double> loss_av,
                         double alpha);

// ---------------------------------------------------------------------------
// Forward caches. Everything the backward pass needs is kept explicit.
// ---------------------------------------------------------------------------

struct UtteranceCache {
  Eigen::MatrixXd x;        // phone_dim x T input frames
  Eigen::MatrixXd h1, z;    // H x T: first layer, frame latents
  std::vector<int> masked_positions;
  std::vector<char> is_masked;  // size T
  Eigen::MatrixXd z_tilde;      // latents after mask substitution (== z in eval)
  Eigen::MatrixXd c;            // H x T context output
  Eigen::VectorXd attn_logits, attn;  // T
  Eigen::VectorXd pooled;       // H, attention-pooled context
  Eigen::VectorXd proj_h;       // H
  Eigen::VectorXd embedding;    // E
  int frames() const { return static_cast<int>(x.cols()); }
};

struct SceneCache {
  Eigen::MatrixXd y;       // visual_dim x M object features
  Eigen::MatrixXd g1, g2;  // H x M
  Eigen::VectorXd pooled, proj_h, embedding;
};

/// Full forward pass over one utterance, eval mode (no masking).
UtteranceCache encode_utterance_cache(const ParamSet& p, const ModelConfig& cfg,
                                      const Eigen::MatrixXd& frames);

/// Training-mode forward: selects mask spans covering ~mask_fraction of the
/// frames, replaces masked latents with the learned mask vector, then runs the
/// context mixer and pooling on the masked sequence.
UtteranceCache encode_utterance_masked(const ParamSet& p, const ModelConfig& cfg,
                                       const Eigen::MatrixXd& frames, double mask_fraction,
                                       int mask_span, class Rng& rng);

SceneCache encode_scene_cache(const ParamSet& p, const ModelConfig& cfg,
                              const Eigen::MatrixXd& objects);

/// Utterance embedding (the learner's audio-side output vector).
Eigen::VectorXd encode_utterance(const ParamSet& p, const ModelConfig& cfg,
                                 const Eigen::MatrixXd& frames);

/// Scene embedding; mean pooling over objects makes it permutation-invariant.
Eigen::VectorXd encode_scene(const ParamSet& p, const ModelConfig& cfg,
                             const Eigen::MatrixXd& objects);

/// The semantic similarity score: plain dot product.
double similarity(const Eigen::VectorXd& audio_embedding, const Eigen::VectorXd& scene_embedding);

// ---------------------------------------------------------------------------
// Masked prediction
// ---------------------------------------------------------------------------

struct MaskedPredCache {
  std::vector<int> assignment;              // nearest code per frame
  std::vector<std::vector<int>> candidates; // per masked position; [0] is the target
  std::vector<Eigen::VectorXd> probs;       // softmax over candidates
  double ce_sum = 0.0;
  int n_positions = 0;
};

/// Scores each masked position's context output against its quantized target
/// plus n_negatives distractor codes drawn from other frames of the same
/// utterance. Cosine similarities at temperature tau, cross-entropy on the
/// target.
MaskedPredCache masked_prediction_forward(const ParamSet& p, const ModelConfig& cfg,
                                          const UtteranceCache& uc, int n_negatives,
                                          double temperature, class Rng& rng);

/// Diversity penalty (V - perplexity(usage/sum)) / V from hard-assignment
/// usage counts. Zero iff usage is uniform; (V-1)/V for a point mass.
double diversity_from_usage(const Eigen::VectorXd& usage);

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

/// Bidirectional InfoNCE over concurrent pairs. Embeddings are columns
/// (E x N); column i of each side belongs to the same pair. N=1 gives 0.
double infonce_loss(const Eigen::MatrixXd& audio_embeddings,
                    const Eigen::MatrixXd& scene_embeddings, double temperature);

/// Same, also accumulating d loss / d embeddings (scaled by `weight`).
double infonce_loss_grad(const Eigen::MatrixXd& audio_embeddings,
                         const Eigen::MatrixXd& scene_embeddings, double temperature,
                         double weight, Eigen::MatrixXd& d_audio, Eigen::MatrixXd& d_scene);

// ---------------------------------------------------------------------------
// Batch loss + gradients
// ---------------------------------------------------------------------------

/// One training example; `objects` may be empty for the auditory-only stage.
struct PairExample {
  Eigen::MatrixXd frames;   // phone_dim x T
  Eigen::MatrixXd objects;  // visual_dim x M
};

struct StepLoss {
  LossBreakdown breakdown;
  long long masked_positions = 0;
  bool infonce_skipped = false;  // batch of size 1 contributes no pair loss
};

/// Forward (and optionally backward) over one batch. All stochastic choices
/// (mask spans, distractor draws) derive from `seed`, so repeated calls with
/// the same arguments are bit-identical; `grads` may be null for a pure loss
/// evaluation (used by the finite-difference checker).
StepLoss compute_loss_and_grads(const ParamSet& p, const ModelConfig& cfg,
                                std::span<const PairExample> batch, const TrainConfig& tc,
                                Stage stage, std::uint64_t seed, ParamSet* grads);

}  // namespace xsl
