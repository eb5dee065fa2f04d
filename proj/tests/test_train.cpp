#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "tunekit/toy.hpp"
#include "tunekit/train.hpp"

using namespace tunekit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) {
        path = fs::temp_directory_path() / ("tk_train_" + name + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

ModelConfig toy_model_config(uint64_t seed = 7) {
    ModelConfig mc;
    mc.vocab_size = 260;
    mc.d_model = 32;
    mc.n_layers = 2;
    mc.n_heads = 4;
    mc.d_ff = 64;
    mc.max_seq_len = 128;
    mc.seed = seed;
    return mc;
}

ModelConfig small_model_config(uint64_t seed = 7) {
    ModelConfig mc;
    mc.vocab_size = 260;
    mc.d_model = 16;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.d_ff = 32;
    mc.max_seq_len = 128;
    mc.seed = seed;
    return mc;
}

TrainConfig quick_config() {
    TrainConfig cfg;
    cfg.batch_size = 1;
    cfg.gradient_accumulation_steps = 2;
    cfg.epochs = 1;
    cfg.max_length = 128;
    cfg.learning_rate = 1e-2;
    cfg.warmup_ratio = 0.0;
    cfg.log_every = 1;
    cfg.tuner.variant = TunerVariant::lora;
    cfg.tuner.rank = 4;
    cfg.tuner.alpha = 8.0;
    cfg.tuner.seed = 11;
    return cfg;
}

std::vector<uint8_t> file_bytes_of(const std::string& path) { return read_file_bytes(path); }

// non-timing fields of two metric streams must agree bit for bit
void check_same_stream(const RunMetrics& a, const RunMetrics& b) {
    REQUIRE(a.log_steps.size() == b.log_steps.size());
    for (size_t i = 0; i < a.log_steps.size(); ++i) {
        CHECK(a.log_steps[i].step == b.log_steps[i].step);
        CHECK(a.log_steps[i].train_loss == b.log_steps[i].train_loss);
        CHECK(a.log_steps[i].lr == b.log_steps[i].lr);
        CHECK(a.log_steps[i].trainable_params == b.log_steps[i].trainable_params);
        CHECK(a.log_steps[i].margin == b.log_steps[i].margin);
    }
    CHECK(a.train_loss == b.train_loss);
}

int oracle_sum(const std::string& query) {
    // query shape: "Calculate <a>+<b>"
    const size_t sp = query.find(' ');
    const size_t plus = query.find('+', sp);
    return std::stoi(query.substr(sp + 1, plus - sp - 1)) + std::stoi(query.substr(plus + 1));
}

}  // namespace

TEST_CASE("dpo loss matches the hand-worked fixture") {
    const DpoResult r = dpo_loss({-1.0, -2.0}, {-1.2, -1.5}, 0.1);
    CHECK(r.margin == doctest::Approx(0.7).epsilon(1e-12));
    // exact value is -ln sigmoid(0.07)
    CHECK(std::abs(r.loss - std::log1p(std::exp(-0.07))) < 1e-12);
    CHECK(std::abs(r.loss - 0.658740) < 1e-4);

    const DpoResult eq = dpo_loss({-3.0, -4.0}, {-3.0, -4.0}, 0.1);
    CHECK(eq.margin == 0.0);
    CHECK(std::abs(eq.loss - std::log(2.0)) < 1e-12);

    // confident policy drives the loss toward zero, the opposite grows linearly
    CHECK(dpo_loss({-1.0, -200.0}, {-1.0, -1.0}, 1.0).loss < 1e-6);
    const DpoResult bad = dpo_loss({-200.0, -1.0}, {-1.0, -1.0}, 1.0);
    CHECK(bad.loss == doctest::Approx(199.0).epsilon(1e-9));

    CHECK_THROWS_AS(dpo_loss({0, 0}, {0, 0}, 0.0), ValidationError);
}

TEST_CASE("pre-training encoding puts loss on every byte") {
    TemplateSpec tpl;
    StandardRecord rec;
    rec.query = "ab";
    rec.response = "cd";
    const EncodedSample enc = detail::encode_pt(rec, tpl, 64);
    const std::vector<int> want = {kBosId, 'a', 'b', 'c', 'd', kEosId};
    CHECK(enc.input_ids == want);
    for (size_t i = 0; i + 1 < enc.input_ids.size(); ++i) {
        CHECK(enc.labels[i] == enc.input_ids[i + 1]);
        CHECK(enc.loss_weights[i] == 1.0);
    }
    CHECK(enc.labels.back() == kIgnoreLabel);

    const EncodedSample cut = detail::encode_pt(rec, tpl, 3);
    CHECK(cut.input_ids.size() == 3);
    CHECK(cut.labels[1] == 'b');
}

TEST_CASE("llamapro inserted indices match the expansion") {
    for (const auto& [layers, fresh] : std::vector<std::pair<int, int>>{{2, 1}, {2, 2}, {4, 2}}) {
        ModelConfig mc = small_model_config(3);
        mc.n_layers = layers;
        Model<float> m = build_model<float>(mc);
        std::vector<int> inserted;
        llamapro_expand(m, fresh, &inserted);
        CHECK(inserted == llamapro_inserted_indices(layers, fresh));
    }
    CHECK_THROWS_AS(llamapro_inserted_indices(2, 3), ValidationError);
}

TEST_CASE("sft on the copy task halves the eval loss") {
    const ModelConfig mc = toy_model_config(21);
    const TemplateSpec tpl;
    const auto train_set = toy_copy_dataset(16, 5);

    TrainConfig cfg = quick_config();
    cfg.epochs = 15;  // 8 steps per epoch, 120 total
    cfg.log_every = 20;
    cfg.tuner.rank = 8;
    cfg.tuner.alpha = 16.0;

    const double eval0 = evaluate(build_model<float>(mc), train_set, tpl, cfg).eval_loss;

    TempDir dir("copy");
    TrainRunOptions opts;
    opts.out_dir = dir.sub("run");
    opts.eval_dataset = &train_set;
    const RunMetrics rm = train_sft(build_model<float>(mc), train_set, tpl, cfg, opts);

    CHECK(rm.eval_loss <= 0.5 * eval0);
    CHECK(rm.log_steps.back().step == 120);
    CHECK(rm.param_floats > 0);
    CHECK(rm.grad_floats < rm.param_floats);
    CHECK(rm.optimizer_state_floats == 2 * rm.grad_floats);

    // metrics stream: per-step objects then one final object
    const auto lines = read_jsonl(opts.out_dir + "/metrics.jsonl");
    REQUIRE(lines.size() >= 2);
    int prev = 0;
    for (size_t i = 0; i + 1 < lines.size(); ++i) {
        CHECK(lines[i].at("step").get<int>() > prev);
        prev = lines[i].at("step").get<int>();
        CHECK(lines[i].contains("train_loss"));
        CHECK(lines[i].contains("lr"));
        CHECK(lines[i].contains("tokens_per_second"));
        CHECK(lines[i].contains("trainable_params"));
    }
    CHECK(lines.back().at("final").get<bool>());
    CHECK(lines.back().at("eval_loss").get<double>() == rm.eval_loss);

    // adapter checkpoint with its base landed next to the metrics
    CHECK(fs::exists(opts.out_dir + "/weights.bin"));
    CHECK(fs::exists(opts.out_dir + "/base/weights.bin"));
    CHECK(fs::exists(opts.out_dir + "/optimizer_state.bin"));
}

TEST_CASE("same seed reproduces the metric stream, another seed diverges") {
    const ModelConfig mc = small_model_config(9);
    const TemplateSpec tpl;
    const auto ds = toy_copy_dataset(8, 2);
    TrainConfig cfg = quick_config();
    cfg.epochs = 2;

    const RunMetrics a = train_sft(build_model<float>(mc), ds, tpl, cfg);
    const RunMetrics b = train_sft(build_model<float>(mc), ds, tpl, cfg);
    check_same_stream(a, b);

    TrainConfig other = cfg;
    other.seed = 123;
    const RunMetrics c = train_sft(build_model<float>(mc), ds, tpl, other);
    bool any_diff = false;
    for (size_t i = 0; i < std::min(a.log_steps.size(), c.log_steps.size()); ++i)
        any_diff = any_diff || a.log_steps[i].train_loss != c.log_steps[i].train_loss;
    CHECK(any_diff);
}

TEST_CASE("one optimizer step per accumulation group") {
    const ModelConfig mc = small_model_config(4);
    const TemplateSpec tpl;
    TrainConfig cfg = quick_config();
    cfg.batch_size = 1;
    cfg.gradient_accumulation_steps = 16;
    cfg.learning_rate = 1e-4;

    const RunMetrics rm = train_sft(build_model<float>(mc), toy_copy_dataset(32, 1), tpl, cfg);
    REQUIRE(!rm.log_steps.empty());
    CHECK(rm.log_steps.back().step == 2);
    CHECK(rm.log_steps.size() == 2);

    // a trailing partial group still steps
    const RunMetrics rm2 = train_sft(build_model<float>(mc), toy_copy_dataset(33, 1), tpl, cfg);
    CHECK(rm2.log_steps.back().step == 3);
}

TEST_CASE("empty datasets are validation errors") {
    const ModelConfig mc = small_model_config(4);
    const TemplateSpec tpl;
    const TrainConfig cfg = quick_config();
    const std::vector<StandardRecord> none;
    CHECK_THROWS_AS(train_sft(build_model<float>(mc), none, tpl, cfg), ValidationError);
    CHECK_THROWS_AS(train_dpo(build_model<float>(mc), none, tpl, cfg), ValidationError);
    CHECK_THROWS_AS(evaluate(build_model<float>(mc), none, tpl, cfg), ValidationError);
    CHECK_THROWS_AS(sample_dataset(build_model<float>(mc), none, tpl, 1, 0.0, 1),
                    ValidationError);
}

TEST_CASE("evaluate leaves the model untouched and repeats bit for bit") {
    const ModelConfig mc = small_model_config(13);
    const TemplateSpec tpl;
    const auto ds = toy_add_dataset(4, 3);
    const TrainConfig cfg = quick_config();

    Model<float> model = build_model<float>(mc);
    const std::vector<float> head_before = model.params.get("lm_head").data();
    const EvalMetrics a = evaluate(model, ds, tpl, cfg);
    const EvalMetrics b = evaluate(model, ds, tpl, cfg);
    CHECK(a.eval_loss == b.eval_loss);
    CHECK(a.token_accuracy == b.token_accuracy);
    CHECK(a.exact_match == b.exact_match);
    CHECK(model.params.get("lm_head").data() == head_before);
}

TEST_CASE("untrained token accuracy sits at chance level") {
    const ModelConfig mc = toy_model_config(31);
    const TemplateSpec tpl;
    // raw-byte task with uniformly random targets
    Rng rng(77);
    std::vector<StandardRecord> ds;
    for (int i = 0; i < 12; ++i) {
        StandardRecord r;
        for (int j = 0; j < 48; ++j) r.query += char(rng.uniform_int(256));
        for (int j = 0; j < 48; ++j) r.response += char(rng.uniform_int(256));
        ds.push_back(std::move(r));
    }
    TrainConfig cfg = quick_config();
    const EvalMetrics em = evaluate(build_model<float>(mc), ds, tpl, cfg, TrainTask::pt);

    const double p = 1.0 / mc.vocab_size;
    const double n = 12.0 * 97.0;  // counted next-byte positions
    const double sigma = std::sqrt(p * (1 - p) / n);
    CHECK(std::abs(em.token_accuracy - p) <= 3 * sigma);
    CHECK(em.eval_loss > 4.0);  // near ln(260) for an untrained model
}

TEST_CASE("a memorized sample reaches exact match 1.0") {
    const ModelConfig mc = toy_model_config(15);
    const TemplateSpec tpl;
    const auto ds = toy_copy_dataset(1, 8);

    TrainConfig cfg = quick_config();
    cfg.gradient_accumulation_steps = 1;
    cfg.epochs = 150;
    cfg.log_every = 50;
    cfg.tuner.rank = 8;
    cfg.tuner.alpha = 16.0;

    TrainRunOptions opts;
    opts.eval_dataset = &ds;
    const RunMetrics rm = train_sft(build_model<float>(mc), ds, tpl, cfg, opts);
    CHECK(rm.exact_match == 1.0);
    CHECK(rm.token_accuracy > 0.95);
}

TEST_CASE("loss is mean CE when all weights are one, and grads decompose per token") {
    const ModelConfig mc = [&] {
        ModelConfig c = small_model_config(19);
        c.n_layers = 1;
        return c;
    }();
    const TemplateSpec tpl;
    Model<double> model = build_model<double>(mc);

    StandardRecord rec = toy_copy_dataset(1, 4)[0];
    const EncodedSample enc = encode(rec, tpl, 128, false);
    const int len = int(enc.input_ids.size());
    TokenBatch batch{1, len, std::vector<int32_t>(enc.input_ids.begin(), enc.input_ids.end())};

    // manual mean CE over trained positions from raw probabilities
    Tensor<double> logits = reshape(model.forward(batch), {len, mc.vocab_size});
    double manual = 0;
    int trained = 0;
    for (int i = 0; i < len; ++i) {
        if (enc.labels[size_t(i)] == kIgnoreLabel) continue;
        const double* row = logits.data().data() + size_t(i) * mc.vocab_size;
        double mx = row[0];
        for (int v = 1; v < mc.vocab_size; ++v) mx = std::max(mx, row[v]);
        double z = 0;
        for (int v = 0; v < mc.vocab_size; ++v) z += std::exp(row[v] - mx);
        manual += mx + std::log(z) - row[enc.labels[size_t(i)]];
        ++trained;
    }
    manual /= trained;

    TrainConfig cfg = quick_config();
    const double from_eval = evaluate(model, {rec}, tpl, cfg).eval_loss;
    CHECK(std::abs(from_eval - manual) < 1e-10);

    // gradient of a two-position weighting equals the sum of the one-position
    // gradients; a zero weight contributes nothing
    int p1 = -1, p2 = -1;
    for (int i = 0; i < len; ++i)
        if (enc.labels[size_t(i)] != kIgnoreLabel) (p1 < 0 ? p1 : p2) = i;
    REQUIRE(p2 >= 0);
    auto grad_for = [&](double w1, double w2) {
        Tape<double> tape;
        typename Tape<double>::Scope scope(tape);
        Tensor<double> lg = reshape(model.forward(batch), {len, mc.vocab_size});
        std::vector<double> w(size_t(len), 0.0);
        w[size_t(p1)] = w1;
        w[size_t(p2)] = w2;
        Tensor<double> loss = weighted_cross_entropy(lg, enc.labels, w);
        tape.backward(loss);
        Tensor<double> head = model.params.get("lm_head");
        std::vector<double> g = head.grad();
        head.clear_grad();
        return g;
    };
    const std::vector<double> g1 = grad_for(1.0, 0.0);
    const std::vector<double> g2 = grad_for(0.0, 1.0);
    const std::vector<double> g12 = grad_for(1.0, 1.0);
    double worst = 0;
    for (size_t i = 0; i < g12.size(); ++i)
        worst = std::max(worst, std::abs(g12[i] - g1[i] - g2[i]));
    CHECK(worst < 1e-9);

    const std::vector<double> gz = grad_for(0.0, 0.0);
    for (double v : gz) CHECK(v == 0.0);
}

TEST_CASE("capped run plus resume matches the straight run bit for bit: lora") {
    const ModelConfig mc = small_model_config(23);
    const TemplateSpec tpl;
    const auto ds = toy_copy_dataset(6, 6);
    TrainConfig cfg = quick_config();
    cfg.epochs = 2;  // 3 steps per epoch, 6 total
    cfg.warmup_ratio = 0.25;

    TempDir dir("resume_lora");
    TrainRunOptions all;
    all.out_dir = dir.sub("straight");
    const RunMetrics ra = train_sft(build_model<float>(mc), ds, tpl, cfg, all);

    TrainRunOptions first;
    first.out_dir = dir.sub("cap");
    first.max_optimizer_steps = 4;
    train_sft(build_model<float>(mc), ds, tpl, cfg, first);

    TrainRunOptions second;
    second.out_dir = dir.sub("resumed");
    second.resume_from = dir.sub("cap");
    const RunMetrics rb = train_sft(build_model<float>(mc), ds, tpl, cfg, second);

    CHECK(file_bytes_of(dir.sub("straight") + "/weights.bin") ==
          file_bytes_of(dir.sub("resumed") + "/weights.bin"));

    // the resumed stream is the tail of the straight stream
    REQUIRE(rb.log_steps.size() == 2);
    CHECK(rb.log_steps[0].step == 5);
    CHECK(rb.log_steps[0].train_loss == ra.log_steps[4].train_loss);
    CHECK(rb.log_steps[1].train_loss == ra.log_steps[5].train_loss);

    // a mismatched tuner config must be rejected
    TrainConfig changed = cfg;
    changed.tuner.rank = 8;
    CHECK_THROWS_AS(train_sft(build_model<float>(mc), ds, tpl, changed, second), ValidationError);
}

TEST_CASE("capped run plus resume matches the straight run bit for bit: full") {
    const ModelConfig mc = small_model_config(29);
    const TemplateSpec tpl;
    const auto ds = toy_copy_dataset(6, 7);
    TrainConfig cfg = quick_config();
    cfg.epochs = 2;
    cfg.learning_rate = 1e-3;
    cfg.tuner = TunerConfig{};
    cfg.tuner.variant = TunerVariant::full;

    TempDir dir("resume_full");
    TrainRunOptions all;
    all.out_dir = dir.sub("straight");
    train_sft(build_model<float>(mc), ds, tpl, cfg, all);

    TrainRunOptions first;
    first.out_dir = dir.sub("cap");
    first.max_optimizer_steps = 4;
    train_sft(build_model<float>(mc), ds, tpl, cfg, first);
    TrainRunOptions second;
    second.out_dir = dir.sub("resumed");
    second.resume_from = dir.sub("cap");
    train_sft(build_model<float>(mc), ds, tpl, cfg, second);

    CHECK(file_bytes_of(dir.sub("straight") + "/weights.bin") ==
          file_bytes_of(dir.sub("resumed") + "/weights.bin"));
}

TEST_CASE("capped run plus resume matches the straight run bit for bit: galore") {
    const ModelConfig mc = small_model_config(37);
    const TemplateSpec tpl;
    const auto ds = toy_copy_dataset(6, 9);
    TrainConfig cfg = quick_config();
    cfg.epochs = 2;
    cfg.learning_rate = 1e-3;
    cfg.tuner = TunerConfig{};
    cfg.tuner.variant = TunerVariant::full;
    GaloreConfig g;
    g.rank = 4;
    g.update_interval = 2;  // refreshes straddle the cap
    g.seed = 5;
    cfg.galore = g;

    TempDir dir("resume_galore");
    TrainRunOptions all;
    all.out_dir = dir.sub("straight");
    train_sft(build_model<float>(mc), ds, tpl, cfg, all);

    TrainRunOptions first;
    first.out_dir = dir.sub("cap");
    first.max_optimizer_steps = 4;
    train_sft(build_model<float>(mc), ds, tpl, cfg, first);
    TrainRunOptions second;
    second.out_dir = dir.sub("resumed");
    second.resume_from = dir.sub("cap");
    train_sft(build_model<float>(mc), ds, tpl, cfg, second);

    CHECK(file_bytes_of(dir.sub("straight") + "/weights.bin") ==
          file_bytes_of(dir.sub("resumed") + "/weights.bin"));
}

TEST_CASE("capped run plus resume matches the straight run bit for bit: lisa") {
    const ModelConfig mc = small_model_config(41);
    const TemplateSpec tpl;
    const auto ds = toy_copy_dataset(6, 10);
    TrainConfig cfg = quick_config();
    cfg.epochs = 2;
    cfg.learning_rate = 1e-3;
    cfg.tuner = TunerConfig{};
    cfg.tuner.variant = TunerVariant::lisa;
    cfg.tuner.activated_layers = 1;
    cfg.tuner.reselect_interval = 3;
    cfg.tuner.seed = 2;

    TempDir dir("resume_lisa");
    TrainRunOptions all;
    all.out_dir = dir.sub("straight");
    train_sft(build_model<float>(mc), ds, tpl, cfg, all);

    TrainRunOptions first;
    first.out_dir = dir.sub("cap");
    first.max_optimizer_steps = 4;
    train_sft(build_model<float>(mc), ds, tpl, cfg, first);
    TrainRunOptions second;
    second.out_dir = dir.sub("resumed");
    second.resume_from = dir.sub("cap");
    train_sft(build_model<float>(mc), ds, tpl, cfg, second);

    CHECK(file_bytes_of(dir.sub("straight") + "/weights.bin") ==
          file_bytes_of(dir.sub("resumed") + "/weights.bin"));
}

TEST_CASE("capped run plus resume matches the straight run bit for bit: llamapro") {
    const ModelConfig mc = small_model_config(43);
    const TemplateSpec tpl;
    const auto ds = toy_copy_dataset(6, 11);
    TrainConfig cfg = quick_config();
    cfg.epochs = 2;
    cfg.learning_rate = 1e-3;
    cfg.tuner = TunerConfig{};
    cfg.tuner.variant = TunerVariant::llamapro;
    cfg.tuner.new_blocks = 1;

    TempDir dir("resume_pro");
    TrainRunOptions all;
    all.out_dir = dir.sub("straight");
    train_sft(build_model<float>(mc), ds, tpl, cfg, all);

    TrainRunOptions first;
    first.out_dir = dir.sub("cap");
    first.max_optimizer_steps = 4;
    train_sft(build_model<float>(mc), ds, tpl, cfg, first);
    TrainRunOptions second;
    second.out_dir = dir.sub("resumed");
    second.resume_from = dir.sub("cap");
    train_sft(build_model<float>(mc), ds, tpl, cfg, second);

    CHECK(file_bytes_of(dir.sub("straight") + "/weights.bin") ==
          file_bytes_of(dir.sub("resumed") + "/weights.bin"));
}

TEST_CASE("dpo starts at ln 2 and separates the preferences") {
    const ModelConfig mc = toy_model_config(47);
    const TemplateSpec tpl;
    const auto ds = toy_pref_dataset(6, 2);
    TrainConfig cfg = quick_config();
    cfg.epochs = 3;
    cfg.learning_rate = 5e-3;
    cfg.tuner.rank = 8;
    cfg.tuner.alpha = 16.0;

    // snapshot of the base the adapters must never write
    TempDir dir("dpo");
    {
        const Model<float> base = build_model<float>(mc);
        save_model_checkpoint(base, tpl, dir.sub("before"));
    }

    TrainRunOptions opts;
    opts.out_dir = dir.sub("run");
    const RunMetrics rm = train_dpo(build_model<float>(mc), ds, tpl, cfg, opts);

    REQUIRE(!rm.log_steps.empty());
    CHECK(rm.log_steps[0].step == 1);
    CHECK(std::abs(rm.log_steps[0].train_loss - std::log(2.0)) <= 1e-6);

    REQUIRE(rm.margin_curve.size() == 3);
    CHECK(rm.margin_curve[1] > rm.margin_curve[0]);
    CHECK(rm.margin_curve[2] > rm.margin_curve[1]);
    CHECK(rm.margin_curve.back() > 0.0);

    CHECK(file_bytes_of(dir.sub("before") + "/weights.bin") ==
          file_bytes_of(dir.sub("run") + "/base/weights.bin"));

    // margin shows up in the metrics stream
    const auto lines = read_jsonl(dir.sub("run") + "/metrics.jsonl");
    CHECK(lines[0].contains("margin"));

    const RunMetrics again = train_dpo(build_model<float>(mc), ds, tpl, cfg);
    check_same_stream(rm, again);
    CHECK(rm.margin_curve == again.margin_curve);
}

TEST_CASE("dpo rejects missing rejected responses and non-lora resume") {
    const ModelConfig mc = small_model_config(51);
    const TemplateSpec tpl;
    const TrainConfig cfg = quick_config();
    CHECK_THROWS_AS(train_dpo(build_model<float>(mc), toy_copy_dataset(2, 1), tpl, cfg),
                    ValidationError);

    TrainConfig full_cfg = cfg;
    full_cfg.tuner = TunerConfig{};
    full_cfg.tuner.variant = TunerVariant::full;
    TrainRunOptions opts;
    opts.resume_from = "/nonexistent";
    CHECK_THROWS_AS(train_dpo(build_model<float>(mc), toy_pref_dataset(2, 1), tpl, full_cfg, opts),
                    ValidationError);
}

TEST_CASE("sampling yields n_return candidates per record, deterministically") {
    const ModelConfig mc = small_model_config(53);
    const TemplateSpec tpl;
    const Model<float> model = build_model<float>(mc);
    const auto ds = toy_add_dataset(5, 1);

    const auto cands = sample_dataset(model, ds, tpl, 3, 0.8, 42, 12);
    REQUIRE(cands.size() == 15);
    for (size_t i = 0; i < cands.size(); ++i) {
        CHECK(cands[i].at("query").get<std::string>() == ds[i / 3].query);
        CHECK(cands[i].at("index").get<int>() == int(i % 3));
        CHECK(cands[i].contains("response_candidate"));
        CHECK(cands[i].contains("seed"));
    }

    // same seed: identical files; temperature zero: identical candidates
    const auto again = sample_dataset(model, ds, tpl, 3, 0.8, 42, 12);
    CHECK(cands == again);
    const auto other = sample_dataset(model, ds, tpl, 3, 0.8, 43, 12);
    CHECK(cands != other);

    const auto greedy = sample_dataset(model, ds, tpl, 3, 0.0, 7, 12);
    for (size_t r = 0; r < 5; ++r) {
        const std::string first = greedy[r * 3].at("response_candidate").get<std::string>();
        CHECK(greedy[r * 3 + 1].at("response_candidate").get<std::string>() == first);
        CHECK(greedy[r * 3 + 2].at("response_candidate").get<std::string>() == first);
    }

    CHECK_THROWS_AS(sample_dataset(model, ds, tpl, 0, 0.5, 1), ValidationError);
    CHECK_THROWS_AS(sample_dataset(model, ds, tpl, 1, -0.1, 1), ValidationError);

    TempDir dir("cands");
    write_jsonl(dir.sub("c.jsonl"), cands);
    CHECK(read_jsonl(dir.sub("c.jsonl")) == cands);
}

TEST_CASE("rejection filter keeps exactly the reward-one candidates, deduplicated") {
    std::vector<nlohmann::json> cands = {
        {{"query", "Calculate 1+2"}, {"response_candidate", "3"}, {"index", 0}, {"seed", 1}},
        {{"query", "Calculate 1+2"}, {"response_candidate", "4"}, {"index", 1}, {"seed", 2}},
        {{"query", "Calculate 1+2"}, {"response_candidate", "3"}, {"index", 2}, {"seed", 3}},
        {{"query", "Calculate 2+2"}, {"response_candidate", "4"}, {"index", 0}, {"seed", 4}},
    };
    auto oracle = [](const nlohmann::json& c) {
        return c.at("response_candidate").get<std::string>() ==
                       std::to_string(oracle_sum(c.at("query").get<std::string>()))
                   ? 1
                   : 0;
    };
    const auto kept = rejection_filter(cands, oracle);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].query == "Calculate 1+2");
    CHECK(kept[0].response == "3");
    CHECK(kept[1].query == "Calculate 2+2");
    CHECK(kept[1].response == "4");

    const auto none = rejection_filter(cands, [](const nlohmann::json&) { return 0; });
    CHECK(none.empty());

    CHECK_THROWS_AS(rejection_filter({nlohmann::json{{"query", "x"}}}, oracle), ValidationError);
    CHECK_THROWS_AS(rejection_filter(cands, [](const nlohmann::json&) { return 2; }),
                    ValidationError);
}

TEST_CASE("a rejection round does not hurt held-out exact match") {
    const ModelConfig mc = toy_model_config(61);
    const TemplateSpec tpl;
    const auto train_set = toy_add_dataset(4, 10);
    const auto held = toy_add_dataset(2, 99);

    TrainConfig cfg = quick_config();
    cfg.gradient_accumulation_steps = 1;
    cfg.epochs = 100;  // memorize the four training answers
    cfg.log_every = 100;
    cfg.tuner.rank = 8;
    cfg.tuner.alpha = 16.0;

    TempDir dir("rft");
    TrainRunOptions opts;
    opts.out_dir = dir.sub("sft");
    train_sft(build_model<float>(mc), train_set, tpl, cfg, opts);

    // reload the tuned model and fold the adapter in for the next round
    AdapterCheckpointMeta meta = read_adapter_meta(dir.sub("sft"));
    Model<float> base =
        load_model_checkpoint<float>(resolve_base_ref(dir.sub("sft"), meta.base_checkpoint));
    auto tuned = load_adapter_checkpoint<float>(dir.sub("sft"), std::move(base));
    tuned->merge("default");
    const Model<float> sampler = tuned->model().clone();

    const double em_before = evaluate(sampler, held, tpl, cfg).exact_match;

    const auto cands = sample_dataset(sampler, train_set, tpl, 2, 0.0, 5, 8);
    auto oracle = [](const nlohmann::json& c) {
        return c.at("response_candidate").get<std::string>() ==
                       std::to_string(oracle_sum(c.at("query").get<std::string>()))
                   ? 1
                   : 0;
    };
    const auto kept = rejection_filter(cands, oracle);
    REQUIRE(!kept.empty());
    for (const StandardRecord& r : kept)
        CHECK(r.response == std::to_string(oracle_sum(r.query)));

    TrainConfig round = cfg;
    round.epochs = 4;
    round.learning_rate = 1e-3;
    TrainRunOptions ropts;
    ropts.eval_dataset = &held;
    const RunMetrics rm = train_sft(sampler.clone(), kept, tpl, round, ropts);
    CHECK(rm.exact_match >= em_before);
}

TEST_CASE("bench covers every tuner with sane orderings") {
    const ModelConfig mc = toy_model_config(71);
    const TemplateSpec tpl;
    const auto train_set = toy_copy_dataset(6, 3);
    const auto eval_set = toy_copy_dataset(3, 14);

    TrainConfig base = quick_config();
    base.gradient_accumulation_steps = 3;  // 2 steps per tuner
    base.log_every = 2;
    base.tuner.rank = 4;
    base.tuner.alpha = 8.0;
    base.tuner.activated_layers = 1;
    base.tuner.reselect_interval = 10;
    base.tuner.new_blocks = 2;

    const auto rows = bench_tuners<float>(mc, bench_default_tuners(), train_set, eval_set, tpl, base);
    REQUIRE(rows.size() == 8);
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].tuner == bench_default_tuners()[i]);
        CHECK(rows[i].ok);
        CHECK(rows[i].eval_loss > 0);
        CHECK(rows[i].trainable > 0);
    }

    auto row = [&](const std::string& name) {
        for (const BenchRow& r : rows)
            if (r.tuner == name) return r;
        FAIL(("missing row " + name).c_str());
        return rows[0];
    };
    CHECK(row("full").trainable_pct == 100.0);
    CHECK(row("lora").trainable < row("full").trainable);
    // full trains every base float, so its count is the base total and the
    // lora model total is base plus adapter
    const double lora_total = double(row("full").trainable) + double(row("lora").trainable);
    CHECK(row("lora").trainable_pct ==
          doctest::Approx(100.0 * double(row("lora").trainable) / lora_total).epsilon(1e-9));
    CHECK(bench_memory_proxy(row("lora")) < bench_memory_proxy(row("full")));
    CHECK(row("galore").state_floats < row("full").state_floats);
    CHECK(row("dora").trainable > row("lora").trainable);
    CHECK(row("rslora").trainable == row("lora").trainable);

    const std::string csv = bench_csv(rows);
    CHECK(csv.rfind("tuner,train_loss,eval_loss,trainable,trainable_pct,state_floats,samples_per_s\n",
                    0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);

    const std::string table = bench_table(rows);
    for (const std::string& name : bench_default_tuners())
        CHECK(table.find(name) != std::string::npos);

    // an unknown tuner yields a marked row without stopping the run
    const auto partial = bench_tuners<float>(mc, {"lora", "nosuch"}, train_set, eval_set, tpl, base);
    REQUIRE(partial.size() == 2);
    CHECK(partial[0].ok);
    CHECK(!partial[1].ok);
    CHECK(!partial[1].error.empty());
    CHECK(bench_csv(partial).find("nosuch,failed") != std::string::npos);
    CHECK(bench_table(partial).find("failed") != std::string::npos);
}
