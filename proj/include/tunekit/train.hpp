#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tunekit/checkpoint.hpp"
#include "tunekit/common.hpp"
#include "tunekit/data.hpp"
#include "tunekit/model.hpp"
#include "tunekit/optim.hpp"
#include "tunekit/template.hpp"
#include "tunekit/tensor.hpp"
#include "tunekit/tuners.hpp"

namespace tunekit {

enum class TrainTask { pt, sft };

struct TrainConfig {
    int batch_size = 1;
    int gradient_accumulation_steps = 16;
    int epochs = 1;
    int max_length = 2048;
    double learning_rate = 5e-5;
    double weight_decay = 0.01;
    double warmup_ratio = 0.03;
    uint64_t seed = 0;
    TunerConfig tuner;
    double loraplus_ratio = 1.0;
    std::optional<GaloreConfig> galore;
    bool loss_scale_enabled = false;
    double dpo_beta = 0.1;
    int log_every = 10;

    void validate() const {
        if (batch_size < 1) fail_validation("batch_size must be >= 1");
        if (gradient_accumulation_steps < 1)
            fail_validation("gradient_accumulation_steps must be >= 1");
        if (epochs < 1) fail_validation("epochs must be >= 1");
        if (max_length < 2) fail_validation("max_length must be >= 2");
        if (learning_rate <= 0) fail_validation("learning_rate must be > 0");
        if (weight_decay < 0) fail_validation("weight_decay must be >= 0");
        if (warmup_ratio < 0 || warmup_ratio >= 1) fail_validation("warmup_ratio must be in [0, 1)");
        if (loraplus_ratio <= 0) fail_validation("loraplus_ratio must be > 0");
        if (dpo_beta <= 0) fail_validation("dpo_beta must be > 0");
        if (log_every < 1) fail_validation("log_every must be >= 1");
        tuner.validate();
        if (galore) galore->validate();
    }

    // records consumed per optimizer step
    int records_per_step() const { return batch_size * gradient_accumulation_steps; }
};

struct TrainRunOptions {
    TrainTask task = TrainTask::sft;
    std::string out_dir;      // empty: keep everything in memory, write nothing
    std::string base_ref;     // recorded in adapter checkpoints; empty: base is
                              // saved under <out_dir>/base and referenced as "base"
    std::string resume_from;  // checkpoint dir written by an identical earlier run
    int max_optimizer_steps = 0;  // 0: no cap; otherwise stop after this many
                                  // global steps (the lr schedule still spans the
                                  // full run, so a capped run can be resumed)
    const std::vector<StandardRecord>* eval_dataset = nullptr;
};

struct LogStep {
    int step = 0;
    double train_loss = 0;
    double lr = 0;
    double tokens_per_second = 0;
    size_t trainable_params = 0;
    double margin = 0;  // preference runs only
};

struct EvalMetrics {
    double eval_loss = 0;
    double token_accuracy = 0;
    double exact_match = 0;
};

struct RunMetrics {
    std::vector<LogStep> log_steps;
    double train_loss = 0;  // mean step loss over the final epoch
    double eval_loss = 0;
    double token_accuracy = 0;
    double exact_match = 0;
    double samples_per_second = 0;
    size_t optimizer_state_floats = 0;
    size_t param_floats = 0;
    size_t grad_floats = 0;
    std::vector<double> margin_curve;  // preference runs: mean margin per epoch
    std::string checkpoint_dir;
};

// -0- preference loss on summed response log-probabilities -------------------

struct DpoResult {
    double loss = 0;
    double margin = 0;
};

// policy/ref pairs are (chosen, rejected) response log-probs; the loss is
// -log sigmoid(beta * margin), computed in a softplus form that never
// overflows
inline DpoResult dpo_loss(std::pair<double, double> policy_logps,
                          std::pair<double, double> ref_logps, double beta) {
    if (beta <= 0) fail_validation("dpo beta must be > 0");
    const double margin =
        (policy_logps.first - ref_logps.first) - (policy_logps.second - ref_logps.second);
    const double z = beta * margin;
    const double loss = std::log1p(std::exp(-std::abs(z))) + std::max(-z, 0.0);
    return {loss, margin};
}

namespace detail {

// raw next-byte objective: bos + bytes of query and response + eos, loss on
// every position, head-truncated to max_length
inline EncodedSample encode_pt(const StandardRecord& rec, const TemplateSpec& tpl,
                               int max_length) {
    EncodedSample out;
    out.text = rec.query + rec.response;
    std::vector<int> ids;
    ids.push_back(kBosId);
    for (unsigned char c : out.text) ids.push_back(int(c));
    ids.push_back(kEosId);
    if (int(ids.size()) > max_length) ids.resize(size_t(max_length));
    out.input_ids = ids;
    out.spans.push_back({Role::user, true, 0, out.text.size()});
    out.labels.assign(ids.size(), kIgnoreLabel);
    out.loss_weights.assign(ids.size(), 0.0);
    for (size_t i = 0; i + 1 < ids.size(); ++i) {
        out.labels[i] = ids[i + 1];
        out.loss_weights[i] = 1.0;
    }
    (void)tpl;
    return out;
}

inline EncodedSample encode_record(const StandardRecord& rec, const TemplateSpec& tpl,
                                   const TrainConfig& config, TrainTask task, int max_length) {
    if (task == TrainTask::pt) return encode_pt(rec, tpl, max_length);
    return encode(rec, tpl, max_length, config.loss_scale_enabled);
}

struct Stopwatch {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

// one-of wrapper so the loop does not care which optimizer runs
template <class T>
struct OptimizerHandle {
    std::unique_ptr<AdamW<T>> adamw;
    std::unique_ptr<GaloreAdamW<T>> galore;

    void set_lr_scale(double f) { adamw ? adamw->set_lr_scale(f) : galore->set_lr_scale(f); }
    void step() { adamw ? adamw->step() : galore->step(); }
    int steps_done() const { return adamw ? adamw->steps_done() : galore->steps_done(); }
    size_t state_floats() const { return adamw ? adamw->state_floats() : galore->state_floats(); }
};

template <class T>
struct TrainContext {
    std::unique_ptr<TunedModel<T>> tuned;
    OptimizerHandle<T> opt;
    int done_steps = 0;           // optimizer steps already in the checkpoint
    std::string saved_base_ref;   // base reference recorded on adapter saves
};

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> registry_named(Model<T>& model) {
    const auto& items = model.params.items();
    return {items.begin(), items.end()};
}

// builds the tuned model and optimizer, loading both from resume_from when set
template <class T>
void setup_run(Model<T>&& base, const TrainConfig& config, const TrainRunOptions& opts,
               TrainContext<T>& ctx) {
    const bool lora_family = config.tuner.variant == TunerVariant::lora;
    if (!opts.resume_from.empty()) {
        const nlohmann::json cj = read_config_json(opts.resume_from);
        const std::string kind = cj.at("kind").get<std::string>();
        if (lora_family) {
            if (kind != "adapter")
                fail_validation("resume: lora tuners expect an adapter checkpoint, found kind \"" +
                                kind + "\"");
            AdapterCheckpointMeta meta = read_adapter_meta(opts.resume_from);
            if (meta.adapters.size() != 1) fail_validation("resume expects a single adapter");
            const TunerConfig& stored = meta.adapters[0].second;
            if (stored.variant != config.tuner.variant || stored.rank != config.tuner.rank ||
                stored.alpha != config.tuner.alpha || stored.targets != config.tuner.targets ||
                stored.scaling != config.tuner.scaling || stored.use_dora != config.tuner.use_dora)
                fail_validation("resume: tuner config differs from the checkpoint");
            const std::string base_dir = resolve_base_ref(opts.resume_from, meta.base_checkpoint);
            Model<T> b = load_model_checkpoint<T>(base_dir);
            ctx.tuned = load_adapter_checkpoint<T>(opts.resume_from, std::move(b));
            ctx.saved_base_ref = base_dir;
        } else if (kind != "model") {
            fail_validation("resume: " + std::string(tuner_variant_name(config.tuner.variant)) +
                            " tuning expects a model checkpoint, found kind \"" + kind + "\"");
        } else if (config.tuner.variant == TunerVariant::llamapro) {
            Model<T> m = load_model_checkpoint<T>(opts.resume_from);
            const int original_layers = m.config.n_layers - config.tuner.new_blocks;
            if (original_layers < 1)
                fail_validation("resume: checkpoint depth is below llamapro new_blocks");
            std::vector<int> inserted =
                llamapro_inserted_indices(original_layers, config.tuner.new_blocks);
            ctx.tuned = std::make_unique<TunedModel<T>>(
                std::move(m), "default", config.tuner, std::move(inserted),
                typename TunedModel<T>::AdoptExpanded{});
        } else {
            Model<T> m = load_model_checkpoint<T>(opts.resume_from);
            ctx.tuned = std::make_unique<TunedModel<T>>(
                std::move(m),
                std::vector<std::pair<std::string, TunerConfig>>{{"default", config.tuner}});
        }
    } else {
        ctx.tuned = std::make_unique<TunedModel<T>>(
            std::move(base),
            std::vector<std::pair<std::string, TunerConfig>>{{"default", config.tuner}});
        ctx.saved_base_ref = opts.base_ref;
    }

    // lisa reselects inside the run, so the optimizer tracks every registry
    // parameter and skips whichever carry no gradient
    std::vector<std::pair<std::string, Tensor<T>>> named =
        config.tuner.variant == TunerVariant::lisa ? registry_named(ctx.tuned->model())
                                                   : ctx.tuned->trainable_params();
    if (named.empty()) fail_validation("no trainable parameters");
    if (config.galore) {
        GaloreConfig g = *config.galore;
        g.lr = config.learning_rate;
        g.weight_decay = config.weight_decay;
        ctx.opt.galore = std::make_unique<GaloreAdamW<T>>(std::move(named), g);
    } else {
        auto groups =
            build_param_groups(named, config.learning_rate, config.loraplus_ratio,
                               config.weight_decay);
        ctx.opt.adamw = std::make_unique<AdamW<T>>(std::move(named), std::move(groups));
    }

    if (!opts.resume_from.empty()) {
        const std::string state_path = opts.resume_from + "/optimizer_state.bin";
        if (!std::filesystem::exists(state_path))
            fail_validation("resume requires " + state_path);
        std::vector<std::pair<std::string, std::vector<T>>> entries;
        std::vector<std::pair<std::string, std::vector<double>>> galore_entries;
        const int step_count = load_optimizer_state<T>(state_path, entries, &galore_entries);
        if (ctx.opt.galore) {
            ctx.opt.galore->load_state(entries, galore_entries, step_count);
        } else {
            if (!galore_entries.empty())
                fail_validation("optimizer state holds galore entries but galore is off");
            ctx.opt.adamw->load_state(entries, step_count);
        }
        ctx.done_steps = step_count;
    }
}

// adapter runs save base + adapter; everything else saves a full model
template <class T>
void save_run(TrainContext<T>& ctx, const TemplateSpec& tpl, const TrainConfig& config,
              const TrainRunOptions& opts) {
    if (opts.out_dir.empty()) return;
    if (config.tuner.variant == TunerVariant::lora) {
        std::string ref = ctx.saved_base_ref;
        if (ref.empty()) {
            save_model_checkpoint(ctx.tuned->model(), tpl, opts.out_dir + "/base");
            ref = "base";
        }
        save_adapter_checkpoint(*ctx.tuned, ref, opts.out_dir);
    } else {
        save_model_checkpoint(ctx.tuned->model(), tpl, opts.out_dir);
    }
    const std::string state_path = opts.out_dir + "/optimizer_state.bin";
    if (ctx.opt.galore)
        save_optimizer_state<T>(state_path, ctx.opt.galore->fallback_state_entries(),
                                ctx.opt.galore->steps_done(),
                                ctx.opt.galore->projected_state_entries());
    else
        save_optimizer_state<T>(state_path, ctx.opt.adamw->state_entries(),
                                ctx.opt.adamw->steps_done());
}

inline nlohmann::json log_step_json(const LogStep& ls, bool with_margin) {
    nlohmann::json j = {{"step", ls.step},
                        {"train_loss", ls.train_loss},
                        {"lr", ls.lr},
                        {"tokens_per_second", ls.tokens_per_second},
                        {"trainable_params", ls.trainable_params}};
    if (with_margin) j["margin"] = ls.margin;
    return j;
}

inline nlohmann::json final_json(const RunMetrics& rm) {
    return {{"final", true},
            {"train_loss", rm.train_loss},
            {"eval_loss", rm.eval_loss},
            {"token_accuracy", rm.token_accuracy},
            {"exact_match", rm.exact_match},
            {"samples_per_second", rm.samples_per_second},
            {"optimizer_state_floats", rm.optimizer_state_floats},
            {"param_floats", rm.param_floats},
            {"grad_floats", rm.grad_floats}};
}

// generated text is raw bytes; JSON requires valid UTF-8. Each byte maps to
// the code point of the same value, so any byte string round-trips exactly
// and ASCII is unchanged.
inline std::string bytes_to_utf8(const std::string& bytes) {
    std::string out;
    out.reserve(bytes.size());
    for (const char ch : bytes) {
        const auto c = static_cast<unsigned char>(ch);
        if (c < 0x80) {
            out += char(c);
        } else {
            out += char(0xC0 | (c >> 6));
            out += char(0x80 | (c & 0x3F));
        }
    }
    return out;
}

inline std::string utf8_to_bytes(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (size_t i = 0; i < text.size();) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (c < 0x80) {
            out += char(c);
            ++i;
        } else if ((c == 0xC2 || c == 0xC3) && i + 1 < text.size()) {
            out += char((unsigned(c & 0x1F) << 6) |
                        (static_cast<unsigned char>(text[i + 1]) & 0x3F));
            i += 2;
        } else {
            out += '?';
            ++i;
        }
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// evaluation: weighted CE, argmax token accuracy, greedy exact match

template <class T>
EvalMetrics evaluate(const Model<T>& model, const std::vector<StandardRecord>& dataset,
                     const TemplateSpec& tpl, const TrainConfig& config,
                     TrainTask task = TrainTask::sft) {
    config.validate();
    tpl.validate();
    if (dataset.empty()) fail_validation("evaluate: empty dataset");
    const SpecialTokens specials = specials_from(tpl);
    const int ctx_limit = std::min(config.max_length, model.config.max_seq_len);

    double loss_sum = 0, weight_sum = 0;
    size_t correct = 0, counted = 0, matches = 0;
    for (const StandardRecord& rec : dataset) {
        const EncodedSample enc = detail::encode_record(rec, tpl, config, task, ctx_limit);
        const int len = int(enc.input_ids.size());
        TokenBatch batch{1, len, std::vector<int32_t>(enc.input_ids.begin(), enc.input_ids.end())};
        Tensor<T> logits = reshape(model.forward(batch), {len, model.config.vocab_size});

        std::vector<T> w(enc.loss_weights.size());
        double rec_weight = 0;
        for (size_t i = 0; i < w.size(); ++i) {
            w[i] = T(enc.loss_weights[i]);
            rec_weight += enc.loss_weights[i];
        }
        if (rec_weight > 0) {
            loss_sum += double(weighted_cross_entropy(logits, enc.labels, w).item());
            weight_sum += rec_weight;
        }

        const std::vector<T>& raw = logits.data();
        const int vocab = model.config.vocab_size;
        for (int i = 0; i < len; ++i) {
            if (enc.labels[size_t(i)] == kIgnoreLabel) continue;
            const T* row = raw.data() + size_t(i) * vocab;
            int best = 0;
            for (int v = 1; v < vocab; ++v)
                if (row[v] > row[best]) best = v;
            if (best == enc.labels[size_t(i)]) ++correct;
            ++counted;
        }

        if (task == TrainTask::sft) {
            // greedy continuation must reproduce the reference response exactly;
            // the prompt ends right after the assistant marker
            const SegmentSpan& last = enc.spans.back();
            const std::string prompt_text =
                enc.text.substr(0, last.begin + tpl.assistant_begin.size());
            const std::string reference = enc.text.substr(
                last.begin + tpl.assistant_begin.size(),
                (last.end - last.begin) - tpl.assistant_begin.size() - tpl.assistant_end.size() -
                    tpl.eos.size());
            auto [prompt_ids, offsets] = tokenize_with_offsets(prompt_text, specials);
            const int room = model.config.max_seq_len - int(prompt_ids.size());
            if (room >= 1) {
                GenerationParams gp;
                gp.max_new_tokens = std::min(room, std::max<int>(16, int(reference.size()) + 8));
                gp.temperature = 0.0;
                gp.stop_token = kImEndId;
                const std::vector<int> gen = model.generate(prompt_ids, gp);
                if (decode(gen, specials) == reference) ++matches;
            }
        }
    }
    if (weight_sum == 0) fail_validation("evaluate: dataset has no trainable tokens");

    EvalMetrics em;
    em.eval_loss = loss_sum / weight_sum;
    em.token_accuracy = counted ? double(correct) / double(counted) : 0.0;
    em.exact_match = task == TrainTask::sft ? double(matches) / double(dataset.size()) : 0.0;
    return em;
}

// ---------------------------------------------------------------------------
// supervised fine-tuning (and raw pre-training via options.task)

template <class T>
RunMetrics train_sft(Model<T> base, const std::vector<StandardRecord>& dataset,
                     const TemplateSpec& tpl, const TrainConfig& config,
                     const TrainRunOptions& opts = {}) {
    config.validate();
    tpl.validate();
    if (dataset.empty()) fail_validation("train_sft: empty dataset");
    if (opts.max_optimizer_steps < 0) fail_validation("max_optimizer_steps must be >= 0");

    detail::TrainContext<T> ctx;
    detail::setup_run(std::move(base), config, opts, ctx);
    Model<T>& model = ctx.tuned->model();
    const int vocab = model.config.vocab_size;
    const int ctx_limit = std::min(config.max_length, model.config.max_seq_len);

    std::vector<EncodedSample> encoded;
    encoded.reserve(dataset.size());
    double dataset_weight = 0;
    for (const StandardRecord& rec : dataset) {
        encoded.push_back(detail::encode_record(rec, tpl, config, opts.task, ctx_limit));
        for (double w : encoded.back().loss_weights) dataset_weight += w;
    }
    if (dataset_weight == 0) fail_validation("train_sft: dataset has no trainable tokens");

    const int n = int(dataset.size());
    const int per_step = config.records_per_step();
    const int steps_per_epoch = (n + per_step - 1) / per_step;
    const int total_steps = config.epochs * steps_per_epoch;
    const bool lisa = config.tuner.variant == TunerVariant::lisa;
    if (ctx.done_steps > total_steps)
        fail_validation("resume: checkpoint has " + std::to_string(ctx.done_steps) +
                        " steps but this run plans only " + std::to_string(total_steps));
    if (lisa && ctx.done_steps > 0) {
        const int k = config.tuner.reselect_interval;
        ctx.tuned->lisa_reselect((ctx.done_steps / k) * k);
    }

    RunMetrics rm;
    rm.param_floats = ctx.tuned->total_params();

    std::ofstream metrics_out;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        const bool append = !opts.resume_from.empty() && opts.resume_from == opts.out_dir;
        metrics_out.open(opts.out_dir + "/metrics.jsonl",
                         append ? std::ios::app : std::ios::trunc);
        if (!metrics_out) fail("cannot write " + opts.out_dir + "/metrics.jsonl");
    }

    log_info("train: " + std::string(tuner_variant_name(config.tuner.variant)) + ", " +
             std::to_string(n) + " records, " + std::to_string(total_steps) + " steps" +
             (ctx.done_steps ? ", resuming after step " + std::to_string(ctx.done_steps) : ""));

    detail::Stopwatch run_timer;
    detail::Stopwatch window_timer;
    size_t window_tokens = 0;
    size_t records_done = 0;
    double last_epoch_loss = 0;
    int last_epoch_steps = 0;
    bool stopped = false;

    for (int epoch = 0; epoch < config.epochs && !stopped; ++epoch) {
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng(mix_seed(config.seed, uint64_t(epoch))).shuffle(order);
        const bool final_epoch = epoch == config.epochs - 1;

        for (int g = 0; g < steps_per_epoch; ++g) {
            const int s = epoch * steps_per_epoch + g + 1;
            if (s <= ctx.done_steps) continue;
            if (lisa) ctx.tuned->lisa_reselect(s - 1);

            const int lo = g * per_step, hi = std::min(n, lo + per_step);
            double denom = 0;
            for (int idx = lo; idx < hi; ++idx)
                for (double w : encoded[size_t(order[size_t(idx)])].loss_weights) denom += w;

            double step_loss = 0;
            if (denom > 0) {
                for (int idx = lo; idx < hi; ++idx) {
                    const EncodedSample& enc = encoded[size_t(order[size_t(idx)])];
                    const int len = int(enc.input_ids.size());
                    Tape<T> tape;
                    typename Tape<T>::Scope scope(tape);
                    TokenBatch batch{
                        1, len, std::vector<int32_t>(enc.input_ids.begin(), enc.input_ids.end())};
                    Tensor<T> logits = reshape(ctx.tuned->forward(batch), {len, vocab});
                    std::vector<T> w(enc.loss_weights.size());
                    for (size_t i = 0; i < w.size(); ++i) w[i] = T(enc.loss_weights[i] / denom);
                    Tensor<T> loss = weighted_cross_entropy(logits, enc.labels, w);
                    step_loss += double(loss.item());
                    tape.backward(loss);
                    window_tokens += size_t(len);
                }
            }
            // the schedule spans one slot past the run so the last step keeps
            // a nonzero rate
            const double mult = lr_at(s, total_steps + 1, config.warmup_ratio, 1.0);
            ctx.opt.set_lr_scale(mult);
            ctx.opt.step();
            records_done += size_t(hi - lo);
            if (final_epoch) {
                last_epoch_loss += step_loss;
                ++last_epoch_steps;
            }

            if (s % config.log_every == 0 || s == 1 || s == total_steps) {
                LogStep ls;
                ls.step = s;
                ls.train_loss = step_loss;
                ls.lr = config.learning_rate * mult;
                ls.tokens_per_second = double(window_tokens) / std::max(window_timer.seconds(), 1e-9);
                ls.trainable_params = ctx.tuned->total_trainable();
                rm.log_steps.push_back(ls);
                if (metrics_out) metrics_out << detail::log_step_json(ls, false).dump() << "\n";
                log_info("step " + std::to_string(s) + "/" + std::to_string(total_steps) +
                         " loss " + format_double(ls.train_loss) + " lr " + format_double(ls.lr));
                window_tokens = 0;
                window_timer = detail::Stopwatch{};
            }
            if (opts.max_optimizer_steps > 0 && s >= opts.max_optimizer_steps) {
                stopped = true;
                break;
            }
        }
    }

    rm.train_loss = last_epoch_steps ? last_epoch_loss / last_epoch_steps : 0.0;
    rm.samples_per_second = double(records_done) / std::max(run_timer.seconds(), 1e-9);
    rm.optimizer_state_floats = ctx.opt.state_floats();
    rm.grad_floats = ctx.tuned->total_trainable();
    if (opts.eval_dataset) {
        const EvalMetrics em = evaluate(model, *opts.eval_dataset, tpl, config, opts.task);
        rm.eval_loss = em.eval_loss;
        rm.token_accuracy = em.token_accuracy;
        rm.exact_match = em.exact_match;
    }
    detail::save_run(ctx, tpl, config, opts);
    rm.checkpoint_dir = opts.out_dir;
    if (metrics_out) metrics_out << detail::final_json(rm).dump() << "\n";
    return rm;
}

// ---------------------------------------------------------------------------
// direct preference optimization against a frozen reference copy

template <class T>
RunMetrics train_dpo(Model<T> base, const std::vector<StandardRecord>& dataset,
                     const TemplateSpec& tpl, const TrainConfig& config,
                     const TrainRunOptions& opts = {}) {
    config.validate();
    tpl.validate();
    if (dataset.empty()) fail_validation("train_dpo: empty dataset");
    if (opts.max_optimizer_steps < 0) fail_validation("max_optimizer_steps must be >= 0");
    for (size_t i = 0; i < dataset.size(); ++i)
        if (!dataset[i].rejected_response)
            fail_validation("dpo record " + std::to_string(i) + " has no rejected_response");
    // the frozen reference is rebuilt from the untouched base weights, which
    // only holds when training never writes the registry
    if (!opts.resume_from.empty() && config.tuner.variant != TunerVariant::lora)
        fail_validation("dpo resume is only supported with lora adapters");

    detail::TrainContext<T> ctx;
    detail::setup_run(std::move(base), config, opts, ctx);
    Model<T>& model = ctx.tuned->model();
    const int vocab = model.config.vocab_size;
    const int ctx_limit = std::min(config.max_length, model.config.max_seq_len);

    // clone() drops the adapter hook, so this is the base policy at the start
    // of training
    const Model<T> reference = model.clone();
    const SpecialTokens specials = specials_from(tpl);

    struct PairSample {
        EncodedSample chosen, rejected;
        std::vector<T> wc, wr;  // 1 on response positions, 0 elsewhere
        double ref_chosen = 0, ref_rejected = 0;
    };
    auto response_mask = [&](const EncodedSample& enc) {
        const size_t prompt_tokens =
            tokenize_with_offsets(enc.text.substr(0, enc.spans.back().begin), specials)
                .first.size();
        std::vector<T> w(enc.input_ids.size(), T(0));
        for (size_t i = 0; i + 1 < enc.input_ids.size(); ++i)
            if (enc.labels[i] != kIgnoreLabel && i + 1 >= prompt_tokens) w[i] = T(1);
        return w;
    };
    auto sum_logp = [&](const Model<T>& m, const EncodedSample& enc, const std::vector<T>& w) {
        const int len = int(enc.input_ids.size());
        TokenBatch batch{1, len, std::vector<int32_t>(enc.input_ids.begin(), enc.input_ids.end())};
        Tensor<T> logits = reshape(m.forward(batch), {len, vocab});
        return -double(weighted_cross_entropy(logits, enc.labels, w).item());
    };

    std::vector<PairSample> pairs;
    pairs.reserve(dataset.size());
    for (const StandardRecord& rec : dataset) {
        PairSample p;
        p.chosen = encode(rec, tpl, ctx_limit, false);
        StandardRecord rej = rec;
        rej.response = *rec.rejected_response;
        rej.rejected_response.reset();
        p.rejected = encode(rej, tpl, ctx_limit, false);
        if (p.chosen.text.substr(0, p.chosen.spans.back().begin) !=
            p.rejected.text.substr(0, p.rejected.spans.back().begin))
            fail_validation("dpo: chosen and rejected prompts diverge after truncation");
        p.wc = response_mask(p.chosen);
        p.wr = response_mask(p.rejected);
        p.ref_chosen = sum_logp(reference, p.chosen, p.wc);
        p.ref_rejected = sum_logp(reference, p.rejected, p.wr);
        pairs.push_back(std::move(p));
    }

    const int n = int(dataset.size());
    const int per_step = config.records_per_step();
    const int steps_per_epoch = (n + per_step - 1) / per_step;
    const int total_steps = config.epochs * steps_per_epoch;
    if (ctx.done_steps > total_steps)
        fail_validation("resume: checkpoint has " + std::to_string(ctx.done_steps) +
                        " steps but this run plans only " + std::to_string(total_steps));
    const bool lisa = config.tuner.variant == TunerVariant::lisa;
    if (lisa && ctx.done_steps > 0) {
        const int k = config.tuner.reselect_interval;
        ctx.tuned->lisa_reselect((ctx.done_steps / k) * k);
    }

    RunMetrics rm;
    rm.param_floats = ctx.tuned->total_params();

    std::ofstream metrics_out;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        const bool append = !opts.resume_from.empty() && opts.resume_from == opts.out_dir;
        metrics_out.open(opts.out_dir + "/metrics.jsonl",
                         append ? std::ios::app : std::ios::trunc);
        if (!metrics_out) fail("cannot write " + opts.out_dir + "/metrics.jsonl");
    }

    log_info("dpo: " + std::string(tuner_variant_name(config.tuner.variant)) + ", " +
             std::to_string(n) + " pairs, " + std::to_string(total_steps) + " steps, beta " +
             format_double(config.dpo_beta));

    detail::Stopwatch run_timer;
    detail::Stopwatch window_timer;
    size_t window_tokens = 0;
    size_t records_done = 0;
    double last_epoch_loss = 0;
    int last_epoch_steps = 0;
    bool stopped = false;

    for (int epoch = 0; epoch < config.epochs && !stopped; ++epoch) {
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng(mix_seed(config.seed, uint64_t(epoch))).shuffle(order);
        const bool final_epoch = epoch == config.epochs - 1;
        double epoch_margin = 0;
        int epoch_steps = 0;

        for (int g = 0; g < steps_per_epoch; ++g) {
            const int s = epoch * steps_per_epoch + g + 1;
            if (s <= ctx.done_steps) continue;
            if (lisa) ctx.tuned->lisa_reselect(s - 1);

            const int lo = g * per_step, hi = std::min(n, lo + per_step);
            const double group_n = double(hi - lo);
            double step_loss = 0, step_margin = 0;
            for (int idx = lo; idx < hi; ++idx) {
                const PairSample& p = pairs[size_t(order[size_t(idx)])];
                Tape<T> tape;
                typename Tape<T>::Scope scope(tape);
                auto forward_ce = [&](const EncodedSample& enc, const std::vector<T>& w) {
                    const int len = int(enc.input_ids.size());
                    TokenBatch batch{1, len,
                                     std::vector<int32_t>(enc.input_ids.begin(),
                                                          enc.input_ids.end())};
                    Tensor<T> logits = reshape(ctx.tuned->forward(batch), {len, vocab});
                    window_tokens += size_t(len);
                    return weighted_cross_entropy(logits, enc.labels, w);
                };
                Tensor<T> nll_chosen = forward_ce(p.chosen, p.wc);
                Tensor<T> nll_rejected = forward_ce(p.rejected, p.wr);
                // margin = (logp_c - ref_c) - (logp_r - ref_r) with logp = -nll
                Tensor<T> margin =
                    add(sub(nll_rejected, nll_chosen),
                        Tensor<T>::scalar(T(p.ref_rejected - p.ref_chosen)));
                Tensor<T> loss = softplus(scale(margin, T(-config.dpo_beta)));
                step_loss += double(loss.item()) / group_n;
                step_margin += double(margin.item()) / group_n;
                tape.backward(scale(loss, T(1.0 / group_n)));
            }
            const double mult = lr_at(s, total_steps + 1, config.warmup_ratio, 1.0);
            ctx.opt.set_lr_scale(mult);
            ctx.opt.step();
            records_done += size_t(hi - lo);
            epoch_margin += step_margin;
            ++epoch_steps;
            if (final_epoch) {
                last_epoch_loss += step_loss;
                ++last_epoch_steps;
            }

            if (s % config.log_every == 0 || s == 1 || s == total_steps) {
                LogStep ls;
                ls.step = s;
                ls.train_loss = step_loss;
                ls.lr = config.learning_rate * mult;
                ls.tokens_per_second = double(window_tokens) / std::max(window_timer.seconds(), 1e-9);
                ls.trainable_params = ctx.tuned->total_trainable();
                ls.margin = step_margin;
                rm.log_steps.push_back(ls);
                if (metrics_out) metrics_out << detail::log_step_json(ls, true).dump() << "\n";
                log_info("step " + std::to_string(s) + "/" + std::to_string(total_steps) +
                         " loss " + format_double(ls.train_loss) + " margin " +
                         format_double(ls.margin));
                window_tokens = 0;
                window_timer = detail::Stopwatch{};
            }
            if (opts.max_optimizer_steps > 0 && s >= opts.max_optimizer_steps) {
                stopped = true;
                break;
            }
        }
        if (epoch_steps > 0) rm.margin_curve.push_back(epoch_margin / epoch_steps);
    }

    rm.train_loss = last_epoch_steps ? last_epoch_loss / last_epoch_steps : 0.0;
    rm.samples_per_second = double(records_done) / std::max(run_timer.seconds(), 1e-9);
    rm.optimizer_state_floats = ctx.opt.state_floats();
    rm.grad_floats = ctx.tuned->total_trainable();
    if (opts.eval_dataset) {
        const EvalMetrics em = evaluate(model, *opts.eval_dataset, tpl, config, TrainTask::sft);
        rm.eval_loss = em.eval_loss;
        rm.token_accuracy = em.token_accuracy;
        rm.exact_match = em.exact_match;
    }
    detail::save_run(ctx, tpl, config, opts);
    rm.checkpoint_dir = opts.out_dir;
    if (metrics_out) metrics_out << detail::final_json(rm).dump() << "\n";
    return rm;
}

// ---------------------------------------------------------------------------
// candidate sampling and rejection filtering

template <class T>
std::vector<nlohmann::json> sample_dataset(const Model<T>& model,
                                           const std::vector<StandardRecord>& dataset,
                                           const TemplateSpec& tpl, int n_return,
                                           double temperature, uint64_t seed,
                                           int max_new_tokens = 128) {
    if (n_return < 1) fail_validation("n_return must be >= 1");
    if (temperature < 0) fail_validation("temperature must be >= 0");
    if (max_new_tokens < 1) fail_validation("max_new_tokens must be >= 1");
    if (dataset.empty()) fail_validation("sample_dataset: empty dataset");
    tpl.validate();
    const SpecialTokens specials = specials_from(tpl);

    std::vector<nlohmann::json> out;
    out.reserve(dataset.size() * size_t(n_return));
    for (size_t r = 0; r < dataset.size(); ++r) {
        const std::string prompt_text = segments_text(render_prompt(dataset[r], tpl));
        auto [prompt_ids, offsets] = tokenize_with_offsets(prompt_text, specials);
        const int room = model.config.max_seq_len - int(prompt_ids.size());
        if (room < 1)
            fail_validation("sample_dataset: prompt for record " + std::to_string(r) +
                            " fills the whole context");
        for (int k = 0; k < n_return; ++k) {
            const uint64_t sample_seed =
                mix_seed(seed, uint64_t(r) * uint64_t(n_return) + uint64_t(k));
            GenerationParams gp;
            gp.max_new_tokens = std::min(max_new_tokens, room);
            gp.temperature = temperature;
            gp.seed = sample_seed;
            gp.stop_token = kImEndId;
            const std::vector<int> gen = model.generate(prompt_ids, gp);
            out.push_back({{"query", dataset[r].query},
                           {"response_candidate", detail::bytes_to_utf8(decode(gen, specials))},
                           {"index", k},
                           {"seed", sample_seed}});
        }
    }
    return out;
}

// keeps reward-1 candidates, one per distinct (query, response) pair, in
// input order, as plain training records
inline std::vector<StandardRecord> rejection_filter(
    const std::vector<nlohmann::json>& candidates,
    const std::function<int(const nlohmann::json&)>& reward_fn) {
    std::vector<StandardRecord> kept;
    std::set<std::pair<std::string, std::string>> seen;
    for (const nlohmann::json& c : candidates) {
        if (!c.contains("query") || !c.contains("response_candidate"))
            fail_validation("candidate is missing query or response_candidate");
        const int reward = reward_fn(c);
        if (reward != 0 && reward != 1)
            fail_validation("reward function must return 0 or 1, got " + std::to_string(reward));
        if (reward != 1) continue;
        std::pair<std::string, std::string> key{c.at("query").get<std::string>(),
                                                c.at("response_candidate").get<std::string>()};
        if (!seen.insert(key).second) continue;
        StandardRecord r;
        r.query = key.first;
        r.response = detail::utf8_to_bytes(key.second);
        kept.push_back(std::move(r));
    }
    if (kept.empty()) log_warn("rejection filter kept no candidates");
    return kept;
}

inline void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write " + path);
    for (const nlohmann::json& j : records) out << j.dump() << "\n";
}

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail_validation("cannot open file: " + path);
    std::vector<nlohmann::json> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            fail_validation(path + "#" + std::to_string(line_no) + ": invalid json");
        out.push_back(std::move(j));
    }
    return out;
}

// ---------------------------------------------------------------------------
// tuner comparison bench

struct BenchRow {
    std::string tuner;
    bool ok = false;
    std::string error;
    double train_loss = 0;
    double eval_loss = 0;
    size_t trainable = 0;
    double trainable_pct = 0;
    size_t state_floats = 0;
    double samples_per_s = 0;
    size_t param_floats = 0;
    size_t grad_floats = 0;
};

inline const std::vector<std::string>& bench_default_tuners() {
    static const std::vector<std::string> names = {"full", "lora",  "rslora",   "dora",
                                                   "lora+", "lisa", "llamapro", "galore"};
    return names;
}

// maps a row name onto a concrete TrainConfig; sizes that would exceed the
// toy model are clamped
inline TrainConfig bench_tuner_config(const std::string& name, const ModelConfig& mc,
                                      const TrainConfig& base) {
    TrainConfig cfg = base;
    cfg.galore.reset();
    cfg.loraplus_ratio = 1.0;
    TunerConfig t = base.tuner;
    t.variant = TunerVariant::lora;
    t.use_dora = false;
    t.scaling = LoraScaling::standard;
    if (name == "full") {
        t.variant = TunerVariant::full;
    } else if (name == "lora") {
    } else if (name == "rslora") {
        t.scaling = LoraScaling::rs;
    } else if (name == "dora") {
        t.use_dora = true;
    } else if (name == "lora+") {
        cfg.loraplus_ratio = base.loraplus_ratio != 1.0 ? base.loraplus_ratio : 16.0;
    } else if (name == "lisa") {
        t.variant = TunerVariant::lisa;
        t.activated_layers = std::min(t.activated_layers, mc.n_layers);
    } else if (name == "llamapro") {
        t.variant = TunerVariant::llamapro;
        t.new_blocks = std::min(t.new_blocks, mc.n_layers);
    } else if (name == "galore") {
        t.variant = TunerVariant::full;
        GaloreConfig g = base.galore ? *base.galore : GaloreConfig{};
        if (!base.galore) g.rank = std::max(1, mc.d_model / 4);
        g.seed = base.seed;
        cfg.galore = g;
    } else {
        fail_validation("unknown tuner name: " + name);
    }
    cfg.tuner = t;
    return cfg;
}

template <class T>
std::vector<BenchRow> bench_tuners(const ModelConfig& mc, const std::vector<std::string>& names,
                                   const std::vector<StandardRecord>& train_set,
                                   const std::vector<StandardRecord>& eval_set,
                                   const TemplateSpec& tpl, const TrainConfig& base_config) {
    std::vector<BenchRow> rows;
    rows.reserve(names.size());
    for (const std::string& name : names) {
        BenchRow row;
        row.tuner = name;
        try {
            const TrainConfig cfg = bench_tuner_config(name, mc, base_config);
            TrainRunOptions opts;
            opts.eval_dataset = &eval_set;
            RunMetrics rm = train_sft<T>(build_model<T>(mc), train_set, tpl, cfg, opts);
            row.ok = true;
            row.train_loss = rm.train_loss;
            row.eval_loss = rm.eval_loss;
            row.trainable = rm.grad_floats;
            row.param_floats = rm.param_floats;
            row.grad_floats = rm.grad_floats;
            row.trainable_pct = 100.0 * double(rm.grad_floats) / double(rm.param_floats);
            row.state_floats = rm.optimizer_state_floats;
            row.samples_per_s = rm.samples_per_second;
        } catch (const std::exception& e) {
            row.error = e.what();
            log_warn("bench: tuner " + name + " failed: " + row.error);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// param + grad + optimizer-state float counts stand in for device memory
inline size_t bench_memory_proxy(const BenchRow& r) {
    return r.param_floats + r.grad_floats + r.state_floats;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::string out = "tuner,train_loss,eval_loss,trainable,trainable_pct,state_floats,samples_per_s\n";
    for (const BenchRow& r : rows) {
        if (!r.ok) {
            out += r.tuner + ",failed,,,,,\n";
            continue;
        }
        out += r.tuner + "," + format_double(r.train_loss) + "," + format_double(r.eval_loss) +
               "," + std::to_string(r.trainable) + "," + format_double(r.trainable_pct) + "," +
               std::to_string(r.state_floats) + "," + format_double(r.samples_per_s) + "\n";
    }
    return out;
}

inline std::string bench_table(const std::vector<BenchRow>& rows) {
    auto pad = [](std::string s, size_t width) {
        if (s.size() < width) s += std::string(width - s.size(), ' ');
        return s;
    };
    std::string out;
    out += pad("tuner", 10) + pad("train", 10) + pad("eval", 10) + pad("trainable", 20) +
           pad("mem proxy", 12) + "samples/s\n";
    for (const BenchRow& r : rows) {
        if (!r.ok) {
            out += pad(r.tuner, 10) + "failed: " + r.error + "\n";
            continue;
        }
        out += pad(r.tuner, 10) + pad(format_double(r.train_loss), 10) +
               pad(format_double(r.eval_loss), 10) +
               pad(std::to_string(r.trainable) + " (" +
                       format_percent(double(r.trainable), double(r.param_floats)) + ")",
                   20) +
               pad(std::to_string(bench_memory_proxy(r)), 12) + format_double(r.samples_per_s) +
               "\n";
    }
    return out;
}

}  // namespace tunekit
