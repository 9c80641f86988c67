#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "defectgen/model.hpp"
#include "defectgen/rng.hpp"

using namespace defectgen;

namespace {

DenoiserModel small_model(uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.init_seed = seed;
    return make_model(cfg, make_schedule(100, ScheduleKind::linear));
}

Tensor random_input(const DenoiserModel& m, int64_t N, uint64_t seed) {
    auto rng = make_rng(seed);
    Tensor x({N, m.cfg.input_channels(), m.cfg.latent_size(), m.cfg.latent_size()});
    fill_gaussian(x, rng, 0.5);
    return x;
}

}  // namespace

TEST_CASE("identity codec round trip is exact; range is enforced") {
    auto m = small_model();
    auto rng = make_rng(2);
    Tensor img({3, 32, 32});
    fill_uniform(img, rng, -1.0, 1.0);
    Tensor z = encode_image(m, img);
    CHECK(z.shape == img.shape);
    for (int64_t i = 0; i < z.size(); ++i) CHECK(z[i] == img[i]);
    Tensor back = decode_latent(m, z);
    for (int64_t i = 0; i < back.size(); ++i) CHECK(back[i] == img[i]);

    Tensor bad = Tensor::full({3, 32, 32}, 1.5f);
    CHECK_THROWS(encode_image(m, bad));
}

TEST_CASE("tiny autoencoder honors the latent shape contract") {
    auto m = make_model(ModelConfig::tiny_ae_defaults(), make_schedule(100, ScheduleKind::linear));
    auto rng = make_rng(3);
    Tensor img({3, 32, 32});
    fill_uniform(img, rng, -1.0, 1.0);
    Tensor z = encode_image(m, img);
    CHECK(z.shape == std::vector<int64_t>{4, 16, 16});
    Tensor back = decode_latent(m, z);
    CHECK(back.shape == img.shape);
    CHECK(m.cfg.input_channels() == 9);
}

TEST_CASE("inpaint input concatenates (x_t, b, M) in order") {
    Tensor x_t = Tensor::full({2, 3, 4, 4}, 1.0f);
    Tensor b = Tensor::full({2, 3, 4, 4}, 2.0f);
    Tensor mask = Tensor::full({2, 1, 4, 4}, 3.0f);
    Tensor in = build_inpaint_input(x_t, b, mask);
    CHECK(in.shape == std::vector<int64_t>{2, 7, 4, 4});
    CHECK(in.at(1, 0, 0, 0) == 1.0f);
    CHECK(in.at(1, 3, 0, 0) == 2.0f);
    CHECK(in.at(1, 6, 0, 0) == 3.0f);
    CHECK_THROWS(build_inpaint_input(x_t, Tensor({2, 3, 5, 5}), mask));
    CHECK_THROWS(build_inpaint_input(x_t, b, Tensor({2, 1, 5, 5})));

    auto m = small_model();
    Tensor full_res({32, 32});
    Tensor lat = mask_to_latent(m, full_res);
    CHECK(lat.shape == std::vector<int64_t>{1, 1, 32, 32});
    auto mae = make_model(ModelConfig::tiny_ae_defaults(), make_schedule(10, ScheduleKind::linear));
    Tensor lat2 = mask_to_latent(mae, full_res);
    CHECK(lat2.shape == std::vector<int64_t>{1, 1, 16, 16});
}

TEST_CASE("prompt templates tokenize as specified") {
    auto m = small_model();
    auto d = tokenize_prompt(m, PromptTemplate::defect, "disc");
    auto o = tokenize_prompt(m, PromptTemplate::object, "disc");
    auto p = tokenize_prompt(m, PromptTemplate::plain, "disc");
    REQUIRE(int64_t(d.size()) == m.cfg.seq_len);

    auto word = [&](int64_t id) { return m.vocab[size_t(id)]; };
    CHECK(word(d[0]) == "a");
    CHECK(word(d[1]) == "photo");
    CHECK(word(d[2]) == "of");
    CHECK(word(d[3]) == "<v*>");
    for (size_t i = 4; i < d.size(); ++i) CHECK(word(d[i]) == "<pad>");

    CHECK(word(o[0]) == "a");
    CHECK(word(o[1]) == "disc");
    CHECK(word(o[2]) == "with");
    CHECK(word(o[3]) == "<v*>");
    for (size_t i = 4; i < o.size(); ++i) CHECK(word(o[i]) == "<pad>");

    CHECK(word(p[3]) == "disc");
    CHECK(v_star_position(PromptTemplate::defect) == 3);
    CHECK(v_star_position(PromptTemplate::plain) == -1);

    // exactly one defect token
    const int64_t vstar = int64_t(m.vocab.size()) - 1;
    CHECK(std::count(d.begin(), d.end(), vstar) == 1);
    CHECK(std::count(o.begin(), o.end(), vstar) == 1);
    CHECK(std::count(p.begin(), p.end(), vstar) == 0);

    CHECK_THROWS(tokenize_prompt(m, PromptTemplate::object, "widget"));
}

TEST_CASE("embed_prompt is deterministic") {
    auto m = small_model();
    auto a = embed_prompt(m, PromptTemplate::object, "disc");
    auto b = embed_prompt(m, PromptTemplate::object, "disc");
    CHECK(a.c.shape == std::vector<int64_t>{m.cfg.seq_len, m.cfg.cond_dim});
    CHECK(max_abs_diff(a.c, b.c) == 0.0f);
    CHECK(a.v_star_index == 3);
}

TEST_CASE("predict_noise: shape, determinism, attention row sums") {
    auto m = small_model();
    Tensor x = random_input(m, 2, 10);
    auto pc = embed_prompt(m, PromptTemplate::defect, "disc");
    auto [eps1, stack1] = predict_noise(m, x, {5, 50}, pc.c, true);
    auto [eps2, stack2] = predict_noise(m, x, {5, 50}, pc.c, true);
    CHECK(eps1.shape == std::vector<int64_t>{2, 3, 32, 32});
    CHECK(max_abs_diff(eps1, eps2) == 0.0f);

    REQUIRE(stack1.size() == 2);  // decoder layers only
    CHECK(stack1[0].h == 16);
    CHECK(stack1[1].h == 32);
    for (const auto& maps : stack1) {
        const auto& p = maps.probs;  // (N, heads, HW, L)
        REQUIRE(p.ndim() == 4);
        for (int64_t n = 0; n < p.shape[0]; ++n)
            for (int64_t h = 0; h < p.shape[1]; ++h)
                for (int64_t q = 0; q < p.shape[2]; ++q) {
                    double s = 0;
                    for (int64_t l = 0; l < p.shape[3]; ++l) s += p.at(n, h, q, l);
                    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
                }
    }

    auto [eps_nocap, stack_nocap] = predict_noise(m, x, {5, 50}, pc.c, false);
    CHECK(stack_nocap.empty());
    CHECK(max_abs_diff(eps_nocap, eps1) == 0.0f);
}

TEST_CASE("batched forward equals per-sample forward") {
    auto m = small_model();
    Tensor x = random_input(m, 3, 20);
    auto pc = embed_prompt(m, PromptTemplate::object, "disc");
    std::vector<int64_t> ts = {7, 42, 99};
    auto [batch, _] = predict_noise(m, x, ts, pc.c, false);
    const int64_t per = batch.size() / 3;
    for (int64_t n = 0; n < 3; ++n) {
        Tensor xn({1, x.shape[1], x.shape[2], x.shape[3]});
        std::copy(x.data() + n * xn.size(), x.data() + (n + 1) * xn.size(), xn.data());
        auto [single, __] = predict_noise(m, xn, {ts[size_t(n)]}, pc.c, false);
        for (int64_t i = 0; i < per; ++i) CHECK(single[i] == batch[n * per + i]);
    }
}

TEST_CASE("fresh adapters are exact no-ops; merge stays within 1e-5") {
    auto m = small_model(7);
    Tensor x = random_input(m, 1, 30);
    auto pc = embed_prompt(m, PromptTemplate::defect, "disc");

    set_adapters_enabled(m, true);
    auto [with_adapters, _a] = predict_noise(m, x, {10}, pc.c, false);
    set_adapters_enabled(m, false);
    auto [without, _b] = predict_noise(m, x, {10}, pc.c, false);
    CHECK(max_abs_diff(with_adapters, without) == 0.0f);  // zero-init up factors

    // give the adapters real content, then compare merged vs unmerged
    auto rng = make_rng(31);
    visit_params(m, [&](const std::string& name, Param& p, ParamGroup g) {
        if (g == ParamGroup::adapter && name.find("lora_up") != std::string::npos)
            fill_gaussian(p.value, rng, 0.05);
    });
    set_adapters_enabled(m, true);
    auto [unmerged, _c] = predict_noise(m, x, {10}, pc.c, false);

    merge_adapters(m);
    set_adapters_enabled(m, false);
    auto [merged, _d] = predict_noise(m, x, {10}, pc.c, false);
    CHECK(max_abs_diff(merged, unmerged) <= 1e-5f);

    CHECK_THROWS(merge_adapters(m));  // disabled

    // rank * (d_in + d_out) per adapted projection
    int64_t expect = 0;
    const int64_t r = m.cfg.lora_rank;
    for (int64_t c : {32, 64, 64, 32}) {
        expect += r * (c + c);                      // q
        expect += 2 * (r * (m.cfg.cond_dim + c));   // k, v
        expect += r * (c + c);                      // o
    }
    CHECK(adapter_param_count(m) == expect);
}

TEST_CASE("checkpoint save/load round-trips parameters, schedule and extras") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "defectgen_model_test";
    fs::create_directories(dir);
    const auto path = (dir / "model.ckpt").string();

    auto m = small_model(11);
    Tensor opt_state({4});
    opt_state[0] = 1.5f;
    opt_state[3] = -2.0f;
    save_model_checkpoint(path, m, R"({"step": 123})", {{"opt.m.test", &opt_state}});

    auto ck = load_model_checkpoint(path);
    CHECK(models_bitwise_equal(m, ck.model, ParamGroup::backbone, false));
    CHECK(ck.model.sched.T == 100);
    CHECK(ck.model.sched.alpha_cum == m.sched.alpha_cum);
    CHECK(ck.model.cfg.base_width == m.cfg.base_width);
    REQUIRE(ck.extra_tensors.count("opt.m.test") == 1);
    CHECK(max_abs_diff(ck.extra_tensors["opt.m.test"], opt_state) == 0.0f);
    CHECK(ck.extra_meta_json.find("123") != std::string::npos);

    // a forward pass through the loaded model matches the original
    Tensor x = random_input(m, 1, 40);
    auto pc = embed_prompt(m, PromptTemplate::defect, "disc");
    auto [e1, _1] = predict_noise(m, x, {33}, pc.c, false);
    auto [e2, _2] = predict_noise(ck.model, x, {33}, pc.c, false);
    CHECK(max_abs_diff(e1, e2) == 0.0f);
}

TEST_CASE("trainable-set partition: groups cover conditioner and adapters only") {
    auto m = small_model();
    int64_t cond_n = 0, adapter_n = 0, backbone_n = 0;
    visit_params(m, [&](const std::string&, Param& p, ParamGroup g) {
        if (g == ParamGroup::conditioner) cond_n += p.value.size();
        if (g == ParamGroup::adapter) adapter_n += p.value.size();
        if (g == ParamGroup::backbone) backbone_n += p.value.size();
    });
    CHECK(cond_n > 0);
    CHECK(adapter_n == adapter_param_count(m));
    CHECK(backbone_n > cond_n);
}
