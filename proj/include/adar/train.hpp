#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "adar/augment.hpp"
#include "adar/data.hpp"
#include "adar/diffusion.hpp"
#include "adar/encoder.hpp"
#include "adar/error.hpp"
#include "adar/eval.hpp"
#include "adar/numkit.hpp"

namespace adar {

struct TrainConfig {
  std::size_t d = 64;
  std::size_t d_t = 64;
  double lr = 1e-3;
  std::size_t batch_size = 2048;
  std::size_t epochs = 20;
  std::size_t T = kDefaultSteps;
  ScheduleKind schedule = ScheduleKind::linear;
  double beta_start = kDefaultBetaStart;
  std::optional<double> beta_end;  // unset: default_beta_end(T)
  double lambda = 0.3;
  double omega = 1.0;
  double k = 1.0;
  SamplerKind sampler = SamplerKind::adar_adaptive;
  SamplerKind base_sampler = SamplerKind::uniform;  // source of j for the adar_* samplers
  std::size_t dns_m = 8;
  std::size_t fixed_t = 0;  // 0: T/2
  std::uint64_t seed = 2024;
  bool deterministic = true;
  unsigned threads = 1;
  std::size_t warmup_epochs = 0;
  std::size_t eval_every = 0;  // 0: evaluate only after the last epoch
  std::size_t patience = 0;    // 0: no early stopping
  double weight_decay = 0.0;
  EncoderKind encoder = EncoderKind::mf;
  TimeEmbeddingKind time_embedding = TimeEmbeddingKind::literal;
  bool stochastic_reverse = false;
  std::size_t film_layers = 2;
  std::size_t film_width = 0;  // 0: 2 * embedding width

  double resolved_beta_end() const { return beta_end ? *beta_end : default_beta_end(T); }

  // Width of the vectors the diffusion model operates on.
  std::size_t embedding_dim() const noexcept { return encoder == EncoderKind::biased_mf ? d + 1 : d; }

  void validate() const {
    if (d < 1) throw InvalidArgument("d must be at least 1");
    if (d_t < 2 || d_t % 2 != 0) throw InvalidArgument("d_t must be even and at least 2");
    if (!(lr > 0.0)) throw InvalidArgument("lr must be positive");
    if (batch_size < 1) throw InvalidArgument("batch_size must be at least 1");
    if (T < 1) throw InvalidArgument("T must be at least 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("lambda must lie in [0, 1]");
    if (threads < 1) throw InvalidArgument("threads must be at least 1");
    if (weight_decay < 0.0) throw InvalidArgument("weight_decay must be non-negative");
    if (base_sampler != SamplerKind::uniform && base_sampler != SamplerKind::dns)
      throw InvalidArgument("base_sampler must be uniform or dns");
    TransitionConfig{omega, k, T}.validate();
    (void)build_schedule(schedule, T, beta_start, resolved_beta_end());
    sampler_mode().validate(T);
  }

  SamplerMode sampler_mode() const {
    switch (sampler) {
      case SamplerKind::uniform: return SamplerMode::uniform();
      case SamplerKind::dns: return SamplerMode::dns(dns_m);
      case SamplerKind::adar_adaptive: return SamplerMode::adaptive();
      case SamplerKind::adar_random_t: return SamplerMode::random_t();
      case SamplerKind::adar_fixed_t: {
        auto m = SamplerMode::fixed(T);
        if (fixed_t != 0) m.fixed_t = fixed_t;
        return m;
      }
      case SamplerKind::adar_mixed_t: return SamplerMode::mixed(T);
    }
    throw InvalidArgument("unknown sampler");
  }

  DiffusionSchedule make_schedule() const { return build_schedule(schedule, T, beta_start, resolved_beta_end()); }
  TransitionConfig transition() const { return {omega, k, T}; }

  // Stable key = value rendering of every field, used for fingerprints.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "d=" << d << "\nd_t=" << d_t << "\nlr=" << lr << "\nbatch_size=" << batch_size << "\nepochs=" << epochs
       << "\nT=" << T << "\nschedule=" << to_string(schedule) << "\nbeta_start=" << beta_start
       << "\nbeta_end=" << resolved_beta_end() << "\nlambda=" << lambda << "\nomega=" << omega << "\nk=" << k
       << "\nsampler=" << to_string(sampler) << "\nbase_sampler=" << to_string(base_sampler) << "\ndns_m=" << dns_m
       << "\nfixed_t=" << fixed_t << "\nseed=" << seed << "\nwarmup_epochs=" << warmup_epochs
       << "\neval_every=" << eval_every << "\npatience=" << patience << "\nweight_decay=" << weight_decay
       << "\nencoder=" << to_string(encoder) << "\ntime_embedding=" << to_string(time_embedding)
       << "\nstochastic_reverse=" << stochastic_reverse << "\nfilm_layers=" << film_layers
       << "\nfilm_width=" << film_width << '\n';
    return os.str();
  }

  // FNV-1a over canonical(); threads and the determinism flag are excluded
  // because they do not change results.
  std::string fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
  }
};

struct PositivePair {
  std::uint32_t user;
  std::uint32_t item;
  bool operator==(const PositivePair&) const = default;
};

// One epoch: every train positive exactly once, shuffled, then chunked.
inline std::vector<std::vector<PositivePair>> make_batches(const InteractionSet& train, std::size_t batch_size,
                                                           RngStream& rng) {
  if (batch_size < 1) throw InvalidArgument("batch_size must be at least 1");
  std::vector<PositivePair> all;
  all.reserve(train.n_interactions());
  for (std::uint32_t u = 0; u < train.n_users; ++u)
    for (std::uint32_t i : train.adjacency[u]) all.push_back({u, i});
  if (all.empty()) throw EmptyDatasetError("make_batches: no train positives");
  shuffle(std::span<PositivePair>(all), rng);
  std::vector<std::vector<PositivePair>> batches;
  for (std::size_t b = 0; b < all.size(); b += batch_size)
    batches.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(b),
                         all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), b + batch_size)));
  return batches;
}

struct BatchLosses {
  double diff_loss = 0.0;  // mean over the batch; 0 when the phase is skipped
  double rank_loss = 0.0;  // mean over the batch
};

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double diff_loss = 0.0;
  double rank_loss = 0.0;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double diff_loss = 0.0;
  double rank_loss = 0.0;
};

struct TrainArtifacts {
  std::unique_ptr<Encoder> encoder;
  FilmPredictor predictor;
  std::vector<LossRecord> losses;
  std::vector<EpochSummary> epochs;
  std::vector<std::pair<std::size_t, MetricsReport>> periodic;  // (epochs completed, report)
  MetricsReport metrics;
  std::size_t epochs_run = 0;
};

// Owns the two models and their optimizer state for one run. Within each
// batch the diffusion model is updated first, then the encoder; the ranking
// loss never reaches the predictor.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const InteractionSet& train)
      : cfg_(std::move(cfg)),
        train_(&train),
        sched_((cfg_.validate(), cfg_.make_schedule())),
        mode_(cfg_.sampler_mode()),
        user_grads_(train.n_users, cfg_.embedding_dim()),
        item_grads_(train.n_items, cfg_.embedding_dim()) {
    RngStream enc_rng(cfg_.seed, stream_id(0, 0, StreamRole::init_encoder));
    encoder_ = make_encoder(cfg_.encoder, train.n_users, train.n_items, cfg_.d, enc_rng);
    RngStream pred_rng(cfg_.seed, stream_id(0, 0, StreamRole::init_predictor));
    predictor_ = FilmPredictor::xavier(cfg_.embedding_dim(), cfg_.d_t, pred_rng, cfg_.film_layers, cfg_.film_width);
    optimizer_ = FilmOptimizer(predictor_);
    embeddings_ = TimeEmbeddingTable(cfg_.T, cfg_.d_t, cfg_.time_embedding);
    adam_.lr = cfg_.lr;
    adam_.weight_decay = cfg_.weight_decay;
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  const DiffusionSchedule& schedule() const noexcept { return sched_; }
  Encoder& encoder() noexcept { return *encoder_; }
  const Encoder& encoder() const noexcept { return *encoder_; }
  FilmPredictor& predictor() noexcept { return predictor_; }
  const FilmPredictor& predictor() const noexcept { return predictor_; }

  bool trains_diffusion() const noexcept { return mode_.augments(); }

  // Diffusion phase: one (t, eps) draw per positive, one Adam step on the
  // predictor with the batch-mean gradient.
  double diffusion_phase(std::span<const PositivePair> batch, std::size_t epoch, std::size_t batch_index) {
    if (!trains_diffusion() || batch.empty()) return 0.0;
    FilmPredictor grads(predictor_.dim(), predictor_.time_dim(), cfg_.film_layers, cfg_.film_width);
    RngStream rng(cfg_.seed, stream_id(epoch, batch_index, StreamRole::diffusion_noise));
    const double scale = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (const auto& [u, i] : batch) {
      const auto e_u = encoder_->embed_user(u);
      const auto x0 = encoder_->embed_item(i);
      const std::size_t t = 1 + static_cast<std::size_t>(rng.uniform_index(cfg_.T));
      const auto sample = forward_noise(x0, t, sched_, rng);
      total += diffusion_loss_and_grads(predictor_, x0, sample, embeddings_[t], e_u, sched_, grads, scale);
    }
    optimizer_.step(predictor_, grads, adam_);
    return total * scale;
  }

  // Encoder phase: baseline negative j per row, generated e_d when the
  // sampler augments and lambda > 0, then one sparse Adam step. Each row's
  // chain draws from its own stream, so e_d does not depend on how rows are
  // spread over threads; gradients are reduced in row order.
  double encoder_phase(std::span<const PositivePair> batch, std::size_t epoch, std::size_t batch_index) {
    if (batch.empty()) return 0.0;
    RngStream neg_rng(cfg_.seed, stream_id(epoch, batch_index, StreamRole::negative));
    const bool augment = mode_.augments() && cfg_.lambda > 0.0;
    const SamplerKind j_source = mode_.augments() ? cfg_.base_sampler : mode_.kind;
    const std::size_t B = batch.size();

    std::vector<std::uint32_t> negatives(B);
    for (std::size_t b = 0; b < B; ++b) {
      const std::uint32_t u = batch[b].user;
      negatives[b] = j_source == SamplerKind::dns ? dns_negative(u, *train_, *encoder_, cfg_.dns_m, neg_rng)
                                                  : uniform_negative(u, *train_, neg_rng);
    }

    std::vector<std::vector<double>> generated;
    if (augment) generated = generate_batch(batch, epoch, batch_index);

    const double scale = 1.0 / static_cast<double>(B);
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const auto [u, i] = batch[b];
      const std::uint32_t j = negatives[b];
      const auto e_u = encoder_->embed_user(u);
      const auto e_i = encoder_->embed_item(i);
      const auto e_j = encoder_->embed_item(j);
      const PairwiseGrads g = augment ? d_bpr_loss_and_grads(e_u, e_i, e_j, generated[b], cfg_.lambda)
                                      : bpr_loss_and_grads(e_u, e_i, e_j);
      total += g.loss;
      user_grads_.add(u, g.d_user, scale);
      item_grads_.add(i, g.d_pos, scale);
      item_grads_.add(j, g.d_neg, scale);
    }
    encoder_->apply_grads(user_grads_, item_grads_, adam_);
    check_rows(epoch, batch_index);
    user_grads_.clear();
    item_grads_.clear();
    return total * scale;
  }

  BatchLosses train_batch(std::span<const PositivePair> batch, std::size_t epoch, std::size_t batch_index) {
    BatchLosses out;
    out.diff_loss = diffusion_phase(batch, epoch, batch_index);
    if (!std::isfinite(out.diff_loss) || !predictor_.all_finite())
      throw NumericalError(where(epoch, batch_index) + ": non-finite diffusion loss or predictor parameter");
    if (epoch >= cfg_.warmup_epochs) out.rank_loss = encoder_phase(batch, epoch, batch_index);
    if (!std::isfinite(out.rank_loss)) throw NumericalError(where(epoch, batch_index) + ": non-finite ranking loss");
    return out;
  }

  EpochSummary run_epoch(std::size_t epoch, std::vector<LossRecord>* records = nullptr) {
    RngStream shuffle_rng(cfg_.seed, stream_id(epoch, 0, StreamRole::shuffle));
    const auto batches = make_batches(*train_, cfg_.batch_size, shuffle_rng);
    EpochSummary s{epoch, 0.0, 0.0};
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto l = train_batch(batches[b], epoch, b);
      s.diff_loss += l.diff_loss;
      s.rank_loss += l.rank_loss;
      if (records) records->push_back({epoch, b, l.diff_loss, l.rank_loss});
    }
    s.diff_loss /= static_cast<double>(batches.size());
    s.rank_loss /= static_cast<double>(batches.size());
    return s;
  }

 private:
  // e_d for every row of the batch from the current (frozen) predictor.
  std::vector<std::vector<double>> generate_batch(std::span<const PositivePair> batch, std::size_t epoch,
                                                  std::size_t batch_index) const {
    const TransitionConfig tcfg = cfg_.transition();
    const ChainOptions chain{cfg_.time_embedding, cfg_.stochastic_reverse};
    std::vector<std::vector<double>> out(batch.size());
    auto work = [&](std::size_t begin, std::size_t end) {
      FilmSampler sampler(predictor_, sched_, embeddings_, chain);
      for (std::size_t b = begin; b < end; ++b) {
        RngStream rng(cfg_.seed, stream_id(epoch, batch_index, StreamRole::augment, b));
        const auto e_u = encoder_->embed_user(batch[b].user);
        const double p_s = score(e_u, encoder_->embed_item(batch[b].item));
        const auto steps = select_variant_t(mode_, p_s, tcfg, rng);
        out[b] = sampler.sample_mean(e_u, steps, rng);
      }
    };
    const std::size_t workers = std::min<std::size_t>(cfg_.threads, batch.size());
    if (workers <= 1) {
      work(0, batch.size());
    } else {
      std::vector<std::thread> pool;
      const std::size_t chunk = (batch.size() + workers - 1) / workers;
      for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t b = std::min(batch.size(), w * chunk), e = std::min(batch.size(), b + chunk);
        pool.emplace_back(work, b, e);
      }
      for (auto& t : pool) t.join();
    }
    return out;
  }

  static std::string where(std::size_t epoch, std::size_t batch) {
    return "epoch " + std::to_string(epoch) + " batch " + std::to_string(batch);
  }

  void check_rows(std::size_t epoch, std::size_t batch) {
    for (std::uint32_t u : user_grads_.rows())
      if (!all_finite(encoder_->embed_user(u)))
        throw NumericalError(where(epoch, batch) + ": non-finite embedding for user row " + std::to_string(u));
    for (std::uint32_t i : item_grads_.rows())
      if (!all_finite(encoder_->embed_item(i)))
        throw NumericalError(where(epoch, batch) + ": non-finite embedding for item row " + std::to_string(i));
  }

  TrainConfig cfg_;
  const InteractionSet* train_;
  DiffusionSchedule sched_;
  SamplerMode mode_;
  std::unique_ptr<Encoder> encoder_;
  FilmPredictor predictor_;
  FilmOptimizer optimizer_;
  TimeEmbeddingTable embeddings_;
  AdamConfig adam_;
  RowGradients user_grads_;
  RowGradients item_grads_;
};

inline const std::vector<std::size_t>& default_cutoffs() {
  static const std::vector<std::size_t> ks{10, 20};
  return ks;
}

// Fixed epoch budget; optional periodic evaluation with patience on
// Recall@10 of the evaluation split.
inline TrainArtifacts train(const TrainConfig& cfg, const SplitDataset& split) {
  Trainer trainer(cfg, split.train);
  TrainArtifacts art;
  const std::string fp = cfg.fingerprint();
  double best = -1.0;
  std::size_t since_best = 0;
  // Without any test interaction there is nothing to evaluate; the report
  // then stays empty (no cutoffs, zero users).
  const bool can_eval = split.n_test_interactions() > 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    art.epochs.push_back(trainer.run_epoch(epoch, &art.losses));
    art.epochs_run = epoch + 1;
    if (can_eval && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && epoch + 1 < cfg.epochs) {
      auto rep = evaluate(trainer.encoder(), split, default_cutoffs(), cfg.threads, fp);
      const double r10 = rep.recall_at(10);
      art.periodic.emplace_back(epoch + 1, std::move(rep));
      if (cfg.patience > 0) {
        if (r10 > best) {
          best = r10;
          since_best = 0;
        } else if (++since_best >= cfg.patience) {
          break;
        }
      }
    }
  }
  if (can_eval) {
    art.metrics = evaluate(trainer.encoder(), split, default_cutoffs(), cfg.threads, fp);
  } else {
    art.metrics.fingerprint = fp;
    art.metrics.n_users_skipped = split.train.n_users;
  }
  art.encoder = trainer.encoder().clone();
  art.predictor = trainer.predictor();
  return art;
}

}  // namespace adar
