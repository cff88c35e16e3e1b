#include "xslearn/learner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xslearn/errors.hpp"
#include "xslearn/rng.hpp"

namespace xsl {

namespace {

Eigen::MatrixXd gaussian_matrix(int rows, int cols, double sd, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(rows, cols);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) m(r, c) = sd * rng.gaussian();
  return m;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp();
  return e / e.sum();
}

double log_sum_exp(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  return m + std::log((logits.array() - m).exp().sum());
}

}  // namespace

void ModelConfig::validate() const {
  if (phone_dim < 1 || visual_dim < 1 || hidden_dim < 1 || embed_dim < 1 || codebook_size < 1)
    throw BadConfig("model dimensions must be positive");
  if (context_window < 1 || context_window % 2 == 0)
    throw BadConfig("context_window must be odd and >= 1");
}

void TrainConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw BadConfig("alpha must be in [0,1]");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
    throw BadConfig("warmup_fraction must be in [0,1]");
  if (temperature <= 0.0) throw BadConfig("temperature must be positive");
  if (mask_fraction <= 0.0 || mask_fraction >= 1.0)
    throw BadConfig("mask_fraction must be in (0,1)");
  if (mask_span < 1) throw BadConfig("mask_span must be >= 1");
  if (n_negatives < 1) throw BadConfig("n_negatives must be >= 1");
  if (epochs < 0) throw BadConfig("epochs must be nonnegative");
  if (batch_size < 1) throw BadConfig("batch_size must be >= 1");
  if (learning_rate < 0.0) throw BadConfig("learning_rate must be nonnegative");
  if (validate_every < 1) throw BadConfig("validate_every must be >= 1");
}

bool ParamSet::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const auto& t) { ok = ok && t.allFinite(); });
  return ok;
}

long long ParamSet::coefficient_count() const {
  long long n = 0;
  for_each([&](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

ParamSet init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const int p = config.phone_dim, d = config.visual_dim;
  const int h = config.hidden_dim, e = config.embed_dim;
  const int v = config.codebook_size, w = config.context_window;
  const double sh = 1.0 / std::sqrt(static_cast<double>(h));

  ParamSet out;
  out.enc_w1 = gaussian_matrix(h, p, 1.0 / std::sqrt(static_cast<double>(p)),
                               derive_seed(seed, "enc_w1"));
  out.enc_b1 = Eigen::VectorXd::Zero(h);
  out.enc_w2 = gaussian_matrix(h, h, sh, derive_seed(seed, "enc_w2"));
  out.enc_b2 = Eigen::VectorXd::Zero(h);
  out.mask_vector = gaussian_matrix(h, 1, 0.5, derive_seed(seed, "mask_vector"));
  out.ctx_w.resize(static_cast<std::size_t>(w));
  const double sctx = 1.0 / std::sqrt(static_cast<double>(w * h));
  for (int i = 0; i < w; ++i)
    out.ctx_w[static_cast<std::size_t>(i)] =
        gaussian_matrix(h, h, sctx, derive_seed(seed, "ctx_w." + std::to_string(i)));
  out.ctx_b = Eigen::VectorXd::Zero(h);
  out.attn_query = gaussian_matrix(h, 1, sh, derive_seed(seed, "attn_query"));
  out.aproj_w1 = gaussian_matrix(h, h, sh, derive_seed(seed, "aproj_w1"));
  out.aproj_b1 = Eigen::VectorXd::Zero(h);
  out.aproj_w2 = gaussian_matrix(e, h, sh, derive_seed(seed, "aproj_w2"));
  out.aproj_b2 = Eigen::VectorXd::Zero(e);
  out.codebook = gaussian_matrix(h, v, 0.5, derive_seed(seed, "codebook"));
  out.vis_w1 = gaussian_matrix(h, d, 1.0 / std::sqrt(static_cast<double>(d)),
                               derive_seed(seed, "vis_w1"));
  out.vis_b1 = Eigen::VectorXd::Zero(h);
  out.vis_w2 = gaussian_matrix(h, h, sh, derive_seed(seed, "vis_w2"));
  out.vis_b2 = Eigen::VectorXd::Zero(h);
  out.vproj_w1 = gaussian_matrix(h, h, sh, derive_seed(seed, "vproj_w1"));
  out.vproj_b1 = Eigen::VectorXd::Zero(h);
  // zero output layer: an untrained cross-modal path scores every pair 0, so
  // the model is exactly at chance before any audiovisual learning; the first
  // optimizer step wakes it up through the InfoNCE gradient on this layer
  out.vproj_w2 = Eigen::MatrixXd::Zero(e, h);
  out.vproj_b2 = Eigen::VectorXd::Zero(e);
  return out;
}

ParamSet zeros_like(const ParamSet& shape) {
  ParamSet out = shape;
  out.for_each([](const std::string&, auto& t) { t.setZero(); });
  return out;
}

void perturb_params(ParamSet& params, double sd, std::uint64_t seed) {
  params.for_each([&](const std::string& name, auto& t) {
    Rng rng(derive_seed(seed, name));
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += sd * rng.gaussian();
  });
}

LossBreakdown total_loss(double loss_aud_r, double loss_aud_d, std::optional<double> loss_av,
                         double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw InvalidInput("alpha must be in [0,1]");
  LossBreakdown b;
  b.loss_aud_r = loss_aud_r;
  b.loss_aud_d = loss_aud_d;
  b.loss_aud = loss_aud_r + 0.1 * loss_aud_d;
  b.loss_av = loss_av;
  b.alpha = alpha;
  b.loss_total = loss_av ? alpha * *loss_av + (1.0 - alpha) * b.loss_aud : b.loss_aud;
  return b;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

// Frame encoder + context mixer + attention pooling + projection, operating on
// an already mask-substituted latent sequence.
void run_context_and_pooling(const ParamSet& p, const ModelConfig& cfg, UtteranceCache& uc) {
  const int t_len = uc.frames();
  const int h = cfg.hidden_dim;
  const int k = (cfg.context_window - 1) / 2;

  Eigen::MatrixXd c_pre = p.ctx_b.replicate(1, t_len);
  for (int d = -k; d <= k; ++d) {
    const int t0 = std::max(0, -d);
    const int len = t_len - std::abs(d);
    if (len <= 0) continue;
    c_pre.middleCols(t0, len).noalias() +=
        p.ctx_w[static_cast<std::size_t>(d + k)] * uc.z_tilde.middleCols(t0 + d, len);
  }
  uc.c = c_pre.array().tanh();

  const double scale = 1.0 / std::sqrt(static_cast<double>(h));
  uc.attn_logits = (uc.c.transpose() * p.attn_query) * scale;
  uc.attn = softmax(uc.attn_logits);
  uc.pooled.noalias() = uc.c * uc.attn;

  uc.proj_h = (p.aproj_w1 * uc.pooled + p.aproj_b1).array().tanh();
  uc.embedding.noalias() = p.aproj_w2 * uc.proj_h + p.aproj_b2;
}

void run_frame_encoder(const ParamSet& p, UtteranceCache& uc) {
  uc.h1 = ((p.enc_w1 * uc.x).colwise() + p.enc_b1).array().tanh();
  uc.z = ((p.enc_w2 * uc.h1).colwise() + p.enc_b2).array().tanh();
}

}  // namespace

UtteranceCache encode_utterance_cache(const ParamSet& p, const ModelConfig& cfg,
                                      const Eigen::MatrixXd& frames) {
  if (frames.cols() < 1) throw EmptyInput("utterance has no frames");
  if (frames.rows() != cfg.phone_dim)
    throw DimMismatch("frame dim " + std::to_string(frames.rows()) + " != phone_dim " +
                      std::to_string(cfg.phone_dim));
  UtteranceCache uc;
  uc.x = frames;
  uc.is_masked.assign(static_cast<std::size_t>(frames.cols()), 0);
  run_frame_encoder(p, uc);
  uc.z_tilde = uc.z;
  run_context_and_pooling(p, cfg, uc);
  return uc;
}

UtteranceCache encode_utterance_masked(const ParamSet& p, const ModelConfig& cfg,
                                       const Eigen::MatrixXd& frames, double mask_fraction,
                                       int mask_span, Rng& rng) {
  const int t_len = static_cast<int>(frames.cols());
  if (t_len < 1) throw EmptyInput("utterance has no frames");
  if (t_len <= mask_span)
    throw UtteranceTooShort("utterance has " + std::to_string(t_len) +
                            " frames, needs more than mask_span=" + std::to_string(mask_span));
  UtteranceCache uc;
  uc.x = frames;
  run_frame_encoder(p, uc);

  const int target = std::max(1, static_cast<int>(std::ceil(mask_fraction * t_len)));
  std::vector<int> starts(static_cast<std::size_t>(t_len - mask_span + 1));
  std::iota(starts.begin(), starts.end(), 0);
  rng.shuffle(starts);
  uc.is_masked.assign(static_cast<std::size_t>(t_len), 0);
  int covered = 0;
  for (int s : starts) {
    if (covered >= target) break;
    for (int i = s; i < s + mask_span; ++i) {
      if (!uc.is_masked[static_cast<std::size_t>(i)]) {
        uc.is_masked[static_cast<std::size_t>(i)] = 1;
        ++covered;
      }
    }
  }
  for (int t = 0; t < t_len; ++t)
    if (uc.is_masked[static_cast<std::size_t>(t)]) uc.masked_positions.push_back(t);

  uc.z_tilde = uc.z;
  for (int t : uc.masked_positions) uc.z_tilde.col(t) = p.mask_vector;
  run_context_and_pooling(p, cfg, uc);
  return uc;
}

SceneCache encode_scene_cache(const ParamSet& p, const ModelConfig& cfg,
                              const Eigen::MatrixXd& objects) {
  if (objects.cols() < 1) throw EmptyInput("scene has no objects");
  if (objects.rows() != cfg.visual_dim)
    throw DimMismatch("object dim " + std::to_string(objects.rows()) + " != visual_dim " +
                      std::to_string(cfg.visual_dim));
  SceneCache sc;
  sc.y = objects;
  sc.g1 = ((p.vis_w1 * sc.y).colwise() + p.vis_b1).array().tanh();
  sc.g2 = ((p.vis_w2 * sc.g1).colwise() + p.vis_b2).array().tanh();
  sc.pooled = sc.g2.rowwise().mean();
  sc.proj_h = (p.vproj_w1 * sc.pooled + p.vproj_b1).array().tanh();
  sc.embedding.noalias() = p.vproj_w2 * sc.proj_h + p.vproj_b2;
  return sc;
}

Eigen::VectorXd encode_utterance(const ParamSet& p, const ModelConfig& cfg,
                                 const Eigen::MatrixXd& frames) {
  return encode_utterance_cache(p, cfg, frames).embedding;
}

Eigen::VectorXd encode_scene(const ParamSet& p, const ModelConfig& cfg,
                             const Eigen::MatrixXd& objects) {
  return encode_scene_cache(p, cfg, objects).embedding;
}

double similarity(const Eigen::VectorXd& audio_embedding, const Eigen::VectorXd& scene_embedding) {
  if (audio_embedding.size() != scene_embedding.size())
    throw DimMismatch("similarity dims differ: " + std::to_string(audio_embedding.size()) +
                      " vs " + std::to_string(scene_embedding.size()));
  return audio_embedding.dot(scene_embedding);
}

// ---------------------------------------------------------------------------
// Masked prediction
// ---------------------------------------------------------------------------

MaskedPredCache masked_prediction_forward(const ParamSet& p, const ModelConfig& cfg,
                                          const UtteranceCache& uc, int n_negatives,
                                          double temperature, Rng& rng) {
  const int t_len = uc.frames();
  const int v = cfg.codebook_size;
  MaskedPredCache mp;

  // Hard nearest-neighbor assignment for every frame latent.
  // dist(t, c) = |z_t|^2 - 2 z_t.code_c + |code_c|^2; the first term is
  // constant per t and can be dropped.
  Eigen::VectorXd code_sq = p.codebook.colwise().squaredNorm();
  Eigen::MatrixXd cross = p.codebook.transpose() * uc.z;  // V x T
  mp.assignment.resize(static_cast<std::size_t>(t_len));
  for (int t = 0; t < t_len; ++t) {
    int best = 0;
    double best_d = code_sq[0] - 2.0 * cross(0, t);
    for (int c = 1; c < v; ++c) {
      const double dist = code_sq[c] - 2.0 * cross(c, t);
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    mp.assignment[static_cast<std::size_t>(t)] = best;
  }

  mp.n_positions = static_cast<int>(uc.masked_positions.size());
  mp.candidates.reserve(uc.masked_positions.size());
  mp.probs.reserve(uc.masked_positions.size());
  Eigen::VectorXd code_norm = code_sq.array().sqrt();
  for (int t : uc.masked_positions) {
    std::vector<int> cand(static_cast<std::size_t>(n_negatives) + 1);
    cand[0] = mp.assignment[static_cast<std::size_t>(t)];
    for (int j = 0; j < n_negatives; ++j) {
      // distractor code from another frame of the same utterance
      auto s = rng.uniform_int(0, t_len - 2);
      if (s >= t) ++s;
      cand[static_cast<std::size_t>(j) + 1] = mp.assignment[static_cast<std::size_t>(s)];
    }
    const Eigen::VectorXd cvec = uc.c.col(t);
    const double nc = cvec.norm();
    Eigen::VectorXd logits(cand.size());
    for (std::size_t j = 0; j < cand.size(); ++j) {
      const auto code = p.codebook.col(cand[j]);
      logits[static_cast<Eigen::Index>(j)] =
          cvec.dot(code) / (nc * code_norm[cand[j]]) / temperature;
    }
    Eigen::VectorXd probs = softmax(logits);
    mp.ce_sum += log_sum_exp(logits) - logits[0];
    mp.candidates.push_back(std::move(cand));
    mp.probs.push_back(std::move(probs));
  }
  return mp;
}

double diversity_from_usage(const Eigen::VectorXd& usage) {
  const double total = usage.sum();
  const auto v = static_cast<double>(usage.size());
  if (total <= 0.0) throw EmptyInput("diversity needs at least one assignment");
  double entropy = 0.0;
  for (int i = 0; i < usage.size(); ++i) {
    const double prob = usage[i] / total;
    if (prob > 0.0) entropy -= prob * std::log(prob);
  }
  const double perplexity = std::exp(entropy);
  return (v - perplexity) / v;
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

namespace {

void check_embedding_dims(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimMismatch("embedding matrices must have matching shapes");
  if (a.cols() < 1) throw EmptyInput("InfoNCE needs at least one pair");
}

}  // namespace

double infonce_loss(const Eigen::MatrixXd& audio_embeddings,
                    const Eigen::MatrixXd& scene_embeddings, double temperature) {
  check_embedding_dims(audio_embeddings, scene_embeddings);
  const auto n = static_cast<int>(audio_embeddings.cols());
  Eigen::MatrixXd s = audio_embeddings.transpose() * scene_embeddings / temperature;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    total += log_sum_exp(s.row(i).transpose()) - s(i, i);
    total += log_sum_exp(s.col(i)) - s(i, i);
  }
  return total / (2.0 * n);
}

double infonce_loss_grad(const Eigen::MatrixXd& audio_embeddings,
                         const Eigen::MatrixXd& scene_embeddings, double temperature,
                         double weight, Eigen::MatrixXd& d_audio, Eigen::MatrixXd& d_scene) {
  check_embedding_dims(audio_embeddings, scene_embeddings);
  const auto n = static_cast<int>(audio_embeddings.cols());
  Eigen::MatrixXd s = audio_embeddings.transpose() * scene_embeddings / temperature;

  double total = 0.0;
  Eigen::MatrixXd ds = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd row = s.row(i).transpose();
    total += log_sum_exp(row) - s(i, i);
    ds.row(i) += softmax(row).transpose();
    ds(i, i) -= 1.0;
    const Eigen::VectorXd col = s.col(i);
    total += log_sum_exp(col) - s(i, i);
    ds.col(i) += softmax(col);
    ds(i, i) -= 1.0;
  }
  const double coeff = weight / (2.0 * n * temperature);
  ds *= coeff;
  d_audio.noalias() += scene_embeddings * ds.transpose();
  d_scene.noalias() += audio_embeddings * ds;
  return total / (2.0 * n);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

void backward_utterance(const ParamSet& p, const ModelConfig& cfg, const UtteranceCache& uc,
                        const MaskedPredCache& mp, const Eigen::VectorXd* d_embedding,
                        double ce_coeff, double temperature, ParamSet& g) {
  const int t_len = uc.frames();
  const int h = cfg.hidden_dim;
  const int k = (cfg.context_window - 1) / 2;
  Eigen::MatrixXd d_c = Eigen::MatrixXd::Zero(h, t_len);

  // projection + attention pooling path
  if (d_embedding != nullptr) {
    const Eigen::VectorXd& de = *d_embedding;
    g.aproj_w2.noalias() += de * uc.proj_h.transpose();
    g.aproj_b2 += de;
    Eigen::VectorXd d_proj_h = p.aproj_w2.transpose() * de;
    Eigen::VectorXd d_pre =
        d_proj_h.array() * (1.0 - uc.proj_h.array() * uc.proj_h.array());
    g.aproj_w1.noalias() += d_pre * uc.pooled.transpose();
    g.aproj_b1 += d_pre;
    Eigen::VectorXd d_pooled = p.aproj_w1.transpose() * d_pre;

    const double scale = 1.0 / std::sqrt(static_cast<double>(h));
    Eigen::VectorXd d_alpha = uc.c.transpose() * d_pooled;
    const double mix = uc.attn.dot(d_alpha);
    Eigen::VectorXd d_logits = uc.attn.array() * (d_alpha.array() - mix);
    g.attn_query.noalias() += (uc.c * d_logits) * scale;
    d_c.noalias() += d_pooled * uc.attn.transpose();
    d_c.noalias() += (p.attn_query * d_logits.transpose()) * scale;
  }

  // masked-prediction cross-entropy path
  if (ce_coeff != 0.0) {
    for (std::size_t m = 0; m < uc.masked_positions.size(); ++m) {
      const int t = uc.masked_positions[m];
      const auto& cand = mp.candidates[m];
      const auto& probs = mp.probs[m];
      const Eigen::VectorXd cvec = uc.c.col(t);
      const double nc = cvec.norm();
      for (std::size_t j = 0; j < cand.size(); ++j) {
        const double d_logit =
            ce_coeff * (probs[static_cast<Eigen::Index>(j)] - (j == 0 ? 1.0 : 0.0));
        const double d_cos = d_logit / temperature;
        const auto code = p.codebook.col(cand[j]);
        const double ne = code.norm();
        const double ip = cvec.dot(code);
        const double denom = nc * ne;
        d_c.col(t) += d_cos * (code / denom - (ip / (nc * nc * denom)) * cvec);
        g.codebook.col(cand[j]) += d_cos * (cvec / denom - (ip / (ne * ne * denom)) * code);
      }
    }
  }

  // context mixer backward
  Eigen::MatrixXd d_c_pre = d_c.array() * (1.0 - uc.c.array() * uc.c.array());
  g.ctx_b += d_c_pre.rowwise().sum();
  Eigen::MatrixXd d_zt = Eigen::MatrixXd::Zero(h, t_len);
  for (int d = -k; d <= k; ++d) {
    const int t0 = std::max(0, -d);
    const int len = t_len - std::abs(d);
    if (len <= 0) continue;
    const auto a = d_c_pre.middleCols(t0, len);
    g.ctx_w[static_cast<std::size_t>(d + k)].noalias() +=
        a * uc.z_tilde.middleCols(t0 + d, len).transpose();
    d_zt.middleCols(t0 + d, len).noalias() +=
        p.ctx_w[static_cast<std::size_t>(d + k)].transpose() * a;
  }

  // split into mask-vector gradient vs frame-latent gradient
  Eigen::MatrixXd d_z = std::move(d_zt);
  for (int t : uc.masked_positions) {
    g.mask_vector += d_z.col(t);
    d_z.col(t).setZero();
  }

  // frame encoder backward
  Eigen::MatrixXd d_z_pre = d_z.array() * (1.0 - uc.z.array() * uc.z.array());
  g.enc_w2.noalias() += d_z_pre * uc.h1.transpose();
  g.enc_b2 += d_z_pre.rowwise().sum();
  Eigen::MatrixXd d_h1 = p.enc_w2.transpose() * d_z_pre;
  Eigen::MatrixXd d_h1_pre = d_h1.array() * (1.0 - uc.h1.array() * uc.h1.array());
  g.enc_w1.noalias() += d_h1_pre * uc.x.transpose();
  g.enc_b1 += d_h1_pre.rowwise().sum();
}

void backward_scene(const ParamSet& p, const SceneCache& sc, const Eigen::VectorXd& d_embedding,
                    bool freeze_encoder, ParamSet& g) {
  g.vproj_w2.noalias() += d_embedding * sc.proj_h.transpose();
  g.vproj_b2 += d_embedding;
  Eigen::VectorXd d_proj_h = p.vproj_w2.transpose() * d_embedding;
  Eigen::VectorXd d_pre = d_proj_h.array() * (1.0 - sc.proj_h.array() * sc.proj_h.array());
  g.vproj_w1.noalias() += d_pre * sc.pooled.transpose();
  g.vproj_b1 += d_pre;
  if (freeze_encoder) return;
  Eigen::VectorXd d_pooled = p.vproj_w1.transpose() * d_pre;
  const auto m = static_cast<double>(sc.g2.cols());
  Eigen::MatrixXd d_g2 = (d_pooled / m).replicate(1, sc.g2.cols());
  Eigen::MatrixXd d_g2_pre = d_g2.array() * (1.0 - sc.g2.array() * sc.g2.array());
  g.vis_w2.noalias() += d_g2_pre * sc.g1.transpose();
  g.vis_b2 += d_g2_pre.rowwise().sum();
  Eigen::MatrixXd d_g1 = p.vis_w2.transpose() * d_g2_pre;
  Eigen::MatrixXd d_g1_pre = d_g1.array() * (1.0 - sc.g1.array() * sc.g1.array());
  g.vis_w1.noalias() += d_g1_pre * sc.y.transpose();
  g.vis_b1 += d_g1_pre.rowwise().sum();
}

}  // namespace

StepLoss compute_loss_and_grads(const ParamSet& p, const ModelConfig& cfg,
                                std::span<const PairExample> batch, const TrainConfig& tc,
                                Stage stage, std::uint64_t seed, ParamSet* grads) {
  if (batch.empty()) throw EmptyInput("empty batch");
  const auto n = static_cast<int>(batch.size());
  const bool audiovisual = stage == Stage::kAudiovisual;
  Rng rng(seed);

  std::vector<UtteranceCache> ucs;
  std::vector<MaskedPredCache> mps;
  std::vector<SceneCache> scs;
  ucs.reserve(batch.size());
  mps.reserve(batch.size());
  if (audiovisual) scs.reserve(batch.size());

  long long total_masked = 0;
  double ce_total = 0.0;
  Eigen::VectorXd usage = Eigen::VectorXd::Zero(cfg.codebook_size);
  for (const auto& ex : batch) {
    ucs.push_back(encode_utterance_masked(p, cfg, ex.frames, tc.mask_fraction, tc.mask_span, rng));
    mps.push_back(
        masked_prediction_forward(p, cfg, ucs.back(), tc.n_negatives, tc.temperature, rng));
    total_masked += mps.back().n_positions;
    ce_total += mps.back().ce_sum;
    for (int t : ucs.back().masked_positions)
      usage[mps.back().assignment[static_cast<std::size_t>(t)]] += 1.0;
    if (audiovisual) {
      if (ex.objects.cols() < 1)
        throw EmptyInput("audiovisual stage requires a scene for every pair");
      scs.push_back(encode_scene_cache(p, cfg, ex.objects));
    }
  }

  const double loss_aud_r = ce_total / static_cast<double>(total_masked);
  const double loss_aud_d = diversity_from_usage(usage);

  StepLoss out;
  out.masked_positions = total_masked;

  Eigen::MatrixXd ea, ev, d_ea, d_ev;
  std::optional<double> loss_av;
  if (audiovisual) {
    ea.resize(cfg.embed_dim, n);
    ev.resize(cfg.embed_dim, n);
    for (int i = 0; i < n; ++i) {
      ea.col(i) = ucs[static_cast<std::size_t>(i)].embedding;
      ev.col(i) = scs[static_cast<std::size_t>(i)].embedding;
    }
    d_ea = Eigen::MatrixXd::Zero(cfg.embed_dim, n);
    d_ev = Eigen::MatrixXd::Zero(cfg.embed_dim, n);
    if (n >= 2) {
      if (grads != nullptr) {
        loss_av = infonce_loss_grad(ea, ev, tc.temperature, tc.alpha, d_ea, d_ev);
      } else {
        loss_av = infonce_loss(ea, ev, tc.temperature);
      }
    } else {
      // a lone pair carries no contrastive information
      loss_av = 0.0;
      out.infonce_skipped = true;
    }
  }

  out.breakdown = total_loss(loss_aud_r, loss_aud_d, loss_av, audiovisual ? tc.alpha : 0.0);

  if (grads != nullptr) {
    const double aud_weight = audiovisual ? (1.0 - tc.alpha) : 1.0;
    const double ce_coeff = aud_weight / static_cast<double>(total_masked);
    // the diversity term is computed from hard assignments; it is piecewise
    // constant in the parameters and contributes no gradient
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd* d_emb = nullptr;
      Eigen::VectorXd d_emb_col;
      if (audiovisual) {
        d_emb_col = d_ea.col(i);
        d_emb = &d_emb_col;
      }
      backward_utterance(p, cfg, ucs[static_cast<std::size_t>(i)],
                         mps[static_cast<std::size_t>(i)], d_emb, ce_coeff, tc.temperature,
                         *grads);
      if (audiovisual)
        backward_scene(p, scs[static_cast<std::size_t>(i)], d_ev.col(i),
                       tc.freeze_visual_encoder, *grads);
    }
  }
  return out;
}

}  // namespace xsl
