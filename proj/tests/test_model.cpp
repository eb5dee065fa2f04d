#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <string>
#include <vector>

#include "tunekit/model.hpp"

using namespace tunekit;

namespace {

ModelConfig test_config(uint64_t seed = 11) {
    ModelConfig c;
    c.vocab_size = 260;
    c.d_model = 64;
    c.n_layers = 2;
    c.n_heads = 4;
    c.d_ff = 256;
    c.max_seq_len = 64;
    c.seed = seed;
    return c;
}

// expected registry contents built independently of build_model
std::vector<std::string> expected_paths(int n_layers) {
    std::vector<std::string> out = {"embed.tok"};
    for (int b = 0; b < n_layers; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        out.push_back(p + "attn_norm.gain");
        out.push_back(p + "attn.q_proj");
        out.push_back(p + "attn.k_proj");
        out.push_back(p + "attn.v_proj");
        out.push_back(p + "attn.o_proj");
        out.push_back(p + "ffn_norm.gain");
        out.push_back(p + "ffn.up_proj");
        out.push_back(p + "ffn.down_proj");
    }
    out.push_back("final_norm.gain");
    out.push_back("lm_head");
    return out;
}

}  // namespace

TEST_CASE("registry matches the enumerated path list") {
    auto m = build_model<float>(test_config());
    auto expected = expected_paths(2);
    CHECK(m.params.paths() == expected);
    CHECK(m.params.size() == expected.size());  // 8 per block + embed, final norm, lm_head
    CHECK(m.params.get("embed.tok").numel() == size_t(260 * 64));

    size_t by_shapes = 0;
    for (const auto& [path, t] : m.params.items()) {
        size_t n = 1;
        for (int d : t.shape()) n *= size_t(d);
        by_shapes += n;
        CHECK(t.requires_grad());
    }
    CHECK(by_shapes == m.params.total_params());
    CHECK(m.params.trainable_params() == m.params.total_params());
}

TEST_CASE("weight shapes are input-major") {
    auto m = build_model<float>(test_config());
    CHECK(m.params.get("embed.tok").shape() == std::vector<int>{260, 64});
    CHECK(m.params.get("blocks.0.attn.q_proj").shape() == std::vector<int>{64, 64});
    CHECK(m.params.get("blocks.1.ffn.up_proj").shape() == std::vector<int>{64, 256});
    CHECK(m.params.get("blocks.1.ffn.down_proj").shape() == std::vector<int>{256, 64});
    CHECK(m.params.get("final_norm.gain").shape() == std::vector<int>{64});
    CHECK(m.params.get("lm_head").shape() == std::vector<int>{64, 260});
}

TEST_CASE("same seed builds bit-identical weights, norm gains start at one") {
    auto a = build_model<float>(test_config(7));
    auto b = build_model<float>(test_config(7));
    auto c = build_model<float>(test_config(8));
    bool any_diff = false;
    for (size_t i = 0; i < a.params.size(); ++i) {
        CHECK(a.params.items()[i].second.data() == b.params.items()[i].second.data());
        if (a.params.items()[i].second.data() != c.params.items()[i].second.data())
            any_diff = true;
    }
    CHECK(any_diff);
    for (float g : a.params.get("blocks.0.attn_norm.gain").data()) CHECK(g == 1.0f);
}

TEST_CASE("invalid configs are rejected") {
    ModelConfig c = test_config();
    c.vocab_size = 259;
    CHECK_THROWS_WITH_AS(build_model<float>(c), doctest::Contains("vocab_size"), ValidationError);
    c = test_config();
    c.n_heads = 3;  // 64 % 3 != 0
    CHECK_THROWS_AS(build_model<float>(c), ValidationError);
    c = test_config();
    c.d_ff = 0;
    CHECK_THROWS_AS(build_model<float>(c), ValidationError);
}

TEST_CASE("forward maps (batch, seq) to (batch, seq, vocab)") {
    auto m = build_model<float>(test_config());
    TokenBatch ids{2, 7, std::vector<int32_t>(14, 3)};
    auto logits = m.forward(ids);
    CHECK(logits.shape() == std::vector<int>{2, 7, 260});
}

TEST_CASE("logits at position t ignore tokens after t") {
    auto m = build_model<float>(test_config());
    TokenBatch a{1, 4, {5, 6, 7, 8}};
    TokenBatch b{1, 4, {5, 6, 7, 200}};
    auto la = m.forward(a), lb = m.forward(b);
    for (size_t i = 0; i < size_t(3) * 260; ++i) CHECK(la.data()[i] == lb.data()[i]);
    // and the perturbed position itself must differ
    bool differs = false;
    for (size_t i = size_t(3) * 260; i < size_t(4) * 260; ++i)
        if (la.data()[i] != lb.data()[i]) differs = true;
    CHECK(differs);
}

TEST_CASE("forward rejects bad batches") {
    auto m = build_model<float>(test_config());
    CHECK_THROWS_WITH_AS(m.forward(TokenBatch{0, 0, {}}), doctest::Contains("empty"), Error);
    CHECK_THROWS_WITH_AS(m.forward(TokenBatch{1, 2, {1, 260}}), doctest::Contains("vocab"),
                         Error);
    std::vector<int32_t> longseq(65, 1);
    CHECK_THROWS_WITH_AS(m.forward(TokenBatch{1, 65, longseq}),
                         doctest::Contains("max_seq_len"), Error);
}

TEST_CASE("inference leaves every parameter untouched") {
    auto m = build_model<float>(test_config());
    std::vector<std::vector<float>> before;
    for (const auto& [p, t] : m.params.items()) before.push_back(t.data());
    TokenBatch ids{2, 5, std::vector<int32_t>(10, 42)};
    m.forward(ids);
    for (size_t i = 0; i < m.params.size(); ++i)
        CHECK(m.params.items()[i].second.data() == before[i]);
}

TEST_CASE("position table follows the sinusoid layout") {
    auto m = build_model<float>(test_config());
    auto pe = m.position_slice(2);
    CHECK(pe.shape() == std::vector<int>{2, 64});
    CHECK(pe.data()[0] == 0.0f);                      // sin(0)
    CHECK(pe.data()[1] == 1.0f);                      // cos(0)
    CHECK(pe.data()[64] == doctest::Approx(std::sin(1.0)));
    CHECK(pe.data()[65] == doctest::Approx(std::cos(1.0)));
}

TEST_CASE("target resolution") {
    auto m = build_model<float>(test_config());
    SUBCASE("all-linears picks exactly the block projections") {
        auto got = resolve_targets(m.params, std::string("all-linears"));
        std::vector<std::string> want;
        for (int b = 0; b < 2; ++b) {
            const std::string p = "blocks." + std::to_string(b) + ".";
            want.insert(want.end(), {p + "attn.q_proj", p + "attn.k_proj", p + "attn.v_proj",
                                     p + "attn.o_proj", p + "ffn.up_proj", p + "ffn.down_proj"});
        }
        CHECK(got == want);
        CHECK(got.size() == 12);
    }
    SUBCASE("suffix glob") {
        auto got = resolve_targets(m.params, std::string("*.q_proj"));
        CHECK(got == std::vector<std::string>{"blocks.0.attn.q_proj", "blocks.1.attn.q_proj"});
    }
    SUBCASE("explicit path and comma list") {
        auto got = resolve_targets(m.params, std::string("embed.tok"));
        CHECK(got == std::vector<std::string>{"embed.tok"});
        auto multi = resolve_targets(m.params, std::string("lm_head, *.o_proj"));
        CHECK(multi == std::vector<std::string>{"blocks.0.attn.o_proj", "blocks.1.attn.o_proj",
                                                "lm_head"});
    }
    SUBCASE("no match is an error") {
        CHECK_THROWS_WITH_AS(resolve_targets(m.params, std::string("*.w_proj")),
                             doctest::Contains("matches nothing"), ValidationError);
        CHECK_THROWS_AS(resolve_targets(m.params, std::vector<std::string>{}), ValidationError);
    }
}

TEST_CASE("generation") {
    auto m = build_model<float>(test_config(21));
    std::vector<int> prompt = {10, 20, 30};

    SUBCASE("greedy decode is deterministic") {
        GenerationParams gp;
        gp.max_new_tokens = 8;
        auto a = m.generate(prompt, gp);
        auto b = m.generate(prompt, gp);
        CHECK(a == b);
        CHECK(a.size() == 8);
    }
    SUBCASE("vanishing temperature equals greedy for any seed") {
        GenerationParams greedy;
        greedy.max_new_tokens = 8;
        auto g = m.generate(prompt, greedy);
        for (uint64_t seed : {1ull, 2ull, 3ull}) {
            GenerationParams gp;
            gp.max_new_tokens = 8;
            gp.temperature = 1e-9;
            gp.seed = seed;
            CHECK(m.generate(prompt, gp) == g);
        }
    }
    SUBCASE("top_k 1 equals greedy") {
        GenerationParams gp;
        gp.max_new_tokens = 8;
        gp.temperature = 0.7;
        gp.top_k = 1;
        gp.seed = 99;
        GenerationParams greedy;
        greedy.max_new_tokens = 8;
        CHECK(m.generate(prompt, gp) == m.generate(prompt, greedy));
    }
    SUBCASE("seeded sampling reproduces itself") {
        GenerationParams gp;
        gp.max_new_tokens = 16;
        gp.temperature = 1.3;
        gp.top_k = 40;
        gp.seed = 4;
        CHECK(m.generate(prompt, gp) == m.generate(prompt, gp));
    }
    SUBCASE("stop token as first generated token gives empty continuation") {
        GenerationParams one;
        one.max_new_tokens = 1;
        int first = m.generate(prompt, one).at(0);
        GenerationParams gp;
        gp.max_new_tokens = 5;
        gp.stop_token = first;
        CHECK(m.generate(prompt, gp).empty());
    }
    SUBCASE("bad inputs") {
        GenerationParams gp;
        CHECK_THROWS_AS(m.generate({}, gp), Error);
        std::vector<int> longprompt(65, 1);
        CHECK_THROWS_AS(m.generate(longprompt, gp), Error);
        gp.max_new_tokens = 0;
        CHECK_THROWS_AS(m.generate(prompt, gp), ValidationError);
        gp.max_new_tokens = 1;
        gp.temperature = -0.1;
        CHECK_THROWS_AS(m.generate(prompt, gp), ValidationError);
    }
    SUBCASE("generation never returns out-of-vocab ids") {
        GenerationParams gp;
        gp.max_new_tokens = 12;
        gp.temperature = 2.0;
        gp.seed = 5;
        for (int t : m.generate(prompt, gp)) {
            CHECK(t >= 0);
            CHECK(t < 260);
        }
    }
}

TEST_CASE("clone is a deep copy") {
    auto m = build_model<float>(test_config());
    auto c = m.clone();
    c.params.get("lm_head").data()[0] += 1.0f;
    CHECK(m.params.get("lm_head").data()[0] != c.params.get("lm_head").data()[0]);
    CHECK(c.params.paths() == m.params.paths());
}

TEST_CASE("full forward pass survives a finite-difference gradient check") {
    ModelConfig c;
    c.vocab_size = 260;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 16;
    c.max_seq_len = 8;
    c.seed = 3;
    auto m = build_model<double>(c);
    TokenBatch ids{1, 4, {9, 250, 9, 31}};
    std::vector<int> targets = {250, 9, 31, 77};
    std::vector<double> weights = {1.0, 0.5, 2.0, 1.0};

    auto fn = [&]() {
        auto logits = reshape(m.forward(ids), {4, 260});
        return weighted_cross_entropy(logits, targets, weights);
    };
    std::vector<Tensor<double>> checked = {
        m.params.get("blocks.0.attn.q_proj"), m.params.get("blocks.0.attn.o_proj"),
        m.params.get("blocks.0.attn_norm.gain"), m.params.get("blocks.0.ffn.up_proj"),
        m.params.get("blocks.0.ffn.down_proj"), m.params.get("blocks.0.ffn_norm.gain"),
        m.params.get("final_norm.gain")};
    CHECK(grad_check<double>(fn, checked, 1e-4) < 1e-5);
}
