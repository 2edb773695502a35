#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "adcss/train.hpp"
#include "test_support.hpp"

using namespace adcss;

namespace {

model::ModelConfig tiny_config() {
    model::ModelConfig cfg;
    cfg.frame_len = 16;
    cfg.feat_dim = 12;
    cfg.model_dim = 8;
    cfg.chunk_len = 16;
    cfg.num_heads = 2;
    cfg.depth_dual = 1;
    cfg.n_triple = 1;
    cfg.j_max = 3;
    return cfg;
}

std::filesystem::path temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("adcss_train_" + tag);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

// Short two-speaker toy dataset written through the forge and loaded back.
train::Dataset toy_dataset(const std::string& tag, int mixtures, uint64_t seed) {
    forge::ToyCorpusConfig cc;
    cc.num_speakers = 8;
    cc.min_utterance_s = 0.15;
    cc.max_utterance_s = 0.25;
    forge::ToyCorpus corpus(cc);
    forge::ForgeConfig fc;
    fc.num_mixtures = mixtures;
    fc.min_speakers = 2;
    fc.max_speakers = 2;
    fc.seed = seed;
    fc.track.min_utterances = 1;
    fc.track.max_utterances = 1;
    fc.track.min_silence_s = 0.0;
    fc.track.max_silence_s = 0.1;
    const auto dir = temp_dir(tag);
    forge::build_dataset(corpus, fc, dir.string());
    return train::load_dataset((dir / "manifest.jsonl").string());
}

bool same_bits(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

train::TrainOptions toy_options(const std::string& out_dir, int64_t max_epochs) {
    train::TrainOptions o;
    o.out_dir = out_dir;
    o.phase = 1;
    o.lr = 1e-3;
    o.batch_size = 2;
    o.segment_s = 0.4;
    o.max_epochs = max_epochs;
    o.patience = 50;
    o.seed = 7;
    return o;
}

} // namespace

TEST_CASE("adam first step matches the closed form") {
    Rng rng(311);
    nn::ParamRegistry reg;
    ag::Var x = reg.add("x", Tensor::randn({3}, rng, 1.0));
    const Tensor x0 = x->value;
    Tensor g({3});
    g[0] = 0.7;
    g[1] = -2.0;
    g[2] = 1e-4;

    train::AdamConfig ac;
    ac.lr = 0.01;
    train::Adam adam(reg, ac);
    ag::GradSink sink;
    ag::backward(ag::sum_all(ag::mul(x, ag::constant(g))), &sink);
    adam.step(reg, sink);

    REQUIRE(adam.steps() == 1);
    for (int64_t k = 0; k < 3; ++k) {
        const double expect = x0[k] - ac.lr * g[k] / (std::sqrt(g[k] * g[k]) + ac.eps);
        REQUIRE(x->value[k] == Catch::Approx(expect).margin(1e-14));
    }
}

TEST_CASE("adam minimizes a quadratic") {
    Rng rng(312);
    nn::ParamRegistry reg;
    ag::Var x = reg.add("x", Tensor::randn({4}, rng, 2.0));
    Tensor target({4});
    for (int64_t k = 0; k < 4; ++k) target[k] = 0.5 * static_cast<double>(k) - 1.0;

    train::AdamConfig ac;
    ac.lr = 0.05;
    train::Adam adam(reg, ac);
    for (int step = 0; step < 400; ++step) {
        ag::GradSink sink;
        ag::backward(ag::sum_all(ag::square(ag::sub(x, ag::constant(target)))), &sink);
        adam.step(reg, sink);
    }
    for (int64_t k = 0; k < 4; ++k)
        REQUIRE(x->value[k] == Catch::Approx(target[k]).margin(1e-2));
}

TEST_CASE("checkpoint io round-trips bit-exactly") {
    Rng rng(313);
    train::Checkpoint ck;
    ck.model_config = "config_version = 1\nframe_len = 16\n# comment survives\n";
    ck.rng_state = Rng(99).serialize();
    ck.phase = 2;
    ck.epoch = 17;
    ck.opt_steps = 421;
    ck.best_valid = std::numeric_limits<double>::infinity();
    ck.epochs_since_best = 3;
    ck.params.emplace_back("a.w", Tensor::randn({3, 5}, rng, 1.0));
    ck.params.emplace_back("b", Tensor::full({2}, -0.0));
    ck.adam_m.emplace_back("a.w", Tensor::randn({3, 5}, rng, 1e-12));
    ck.adam_m.emplace_back("b", Tensor::zeros({2}));
    ck.adam_v.emplace_back("a.w", Tensor::randn({3, 5}, rng, 1e300));
    ck.adam_v.emplace_back("b", Tensor::zeros({2}));

    const auto dir = temp_dir("ckpt_io");
    const std::string path = (dir / "t.ckpt").string();
    train::save_checkpoint(path, ck);
    const train::Checkpoint back = train::load_checkpoint(path);

    REQUIRE(back.model_config == ck.model_config);
    REQUIRE(back.rng_state == ck.rng_state);
    REQUIRE(back.phase == 2);
    REQUIRE(back.epoch == 17);
    REQUIRE(back.opt_steps == 421);
    REQUIRE(std::isinf(back.best_valid));
    REQUIRE(back.epochs_since_best == 3);
    REQUIRE(back.params.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        REQUIRE(back.params[i].first == ck.params[i].first);
        REQUIRE(same_bits(back.params[i].second, ck.params[i].second));
        REQUIRE(same_bits(back.adam_m[i].second, ck.adam_m[i].second));
        REQUIRE(same_bits(back.adam_v[i].second, ck.adam_v[i].second));
    }
    // negative zero keeps its sign bit
    REQUIRE(std::signbit(back.params[1].second[0]));
}

TEST_CASE("checkpoint loader rejects damaged files") {
    const auto dir = temp_dir("ckpt_bad");
    train::Checkpoint ck;
    ck.params.emplace_back("x", Tensor::zeros({2}));
    const std::string good = (dir / "good.ckpt").string();
    train::save_checkpoint(good, ck);

    SECTION("bad magic") {
        const std::string path = (dir / "magic.ckpt").string();
        std::ofstream(path, std::ios::binary) << "NOTACKPTxxxxxxxxxxxx";
        REQUIRE_THROWS_AS(train::load_checkpoint(path), InvalidInput);
    }
    SECTION("truncated") {
        std::ifstream in(good, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const std::string path = (dir / "trunc.ckpt").string();
        std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 9);
        REQUIRE_THROWS_AS(train::load_checkpoint(path), InvalidInput);
    }
    SECTION("trailing bytes") {
        std::ifstream in(good, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const std::string path = (dir / "tail.ckpt").string();
        std::ofstream(path, std::ios::binary) << bytes << "junk";
        REQUIRE_THROWS_AS(train::load_checkpoint(path), InvalidInput);
    }
    SECTION("missing file") {
        REQUIRE_THROWS_AS(train::load_checkpoint((dir / "nope.ckpt").string()), InvalidInput);
    }
}

TEST_CASE("segmentation splits long items and keeps short ones whole") {
    train::Dataset ds;
    for (const size_t n : {35000u, 32000u, 7000u, 10u}) {
        train::DatasetItem item;
        item.mixture.assign(n, 0.0);
        ds.items.push_back(std::move(item));
    }
    const auto segs = train::make_segments(ds, 10000, 0.25, 16);

    std::vector<std::vector<int64_t>> by_item(4);
    for (const auto& s : segs) by_item[s.item].push_back(s.len);
    REQUIRE(by_item[0] == std::vector<int64_t>{10000, 10000, 10000, 5000});
    REQUIRE(by_item[1] == std::vector<int64_t>{10000, 10000, 10000}); // 2000 tail dropped
    REQUIRE(by_item[2] == std::vector<int64_t>{7000});                // whole short item
    REQUIRE(by_item[3].empty());                                      // below one frame
}

TEST_CASE("cut_segment slices references and shifts intervals") {
    train::DatasetItem item;
    item.mixture.resize(32000);
    for (size_t i = 0; i < item.mixture.size(); ++i) item.mixture[i] = static_cast<double>(i);
    item.refs.push_back(item.mixture);
    item.intervals.push_back({{0.5, 1.5}, {1.9, 2.5}});

    const auto s = train::cut_segment(item, 16000, 8000, 16000); // window [1.0, 1.5) s
    REQUIRE(s.mixture.size() == 8000);
    REQUIRE(s.mixture.front() == 16000.0);
    REQUIRE(s.refs.size() == 1);
    REQUIRE(s.refs[0] == s.mixture);
    REQUIRE(s.intervals[0].size() == 1);
    REQUIRE(s.intervals[0][0].first == Catch::Approx(0.0));
    REQUIRE(s.intervals[0][0].second == Catch::Approx(0.5));

    REQUIRE_THROWS_AS(train::cut_segment(item, 30000, 8000, 16000), InvalidInput);
}

TEST_CASE("sample_loss is finite across branch configurations") {
    auto ds = toy_dataset("loss", 2, 51);
    const auto& item = ds.items[0];
    train::TrainSample s;
    s.mixture = item.mixture;
    s.refs = item.refs;
    s.intervals = item.intervals;

    for (const bool diar : {true, false}) {
        auto cfg = tiny_config();
        cfg.diar_branch = diar;
        Rng rng(52);
        model::AdcssModel m(cfg, rng);
        const ag::Var loss = train::sample_loss(m, s);
        REQUIRE(std::isfinite(ag::scalar_value(loss)));
    }
    {
        auto cfg = tiny_config();
        cfg.attractor_enabled = false;
        cfg.fixed_j = 2;
        Rng rng(53);
        model::AdcssModel m(cfg, rng);
        REQUIRE(std::isfinite(ag::scalar_value(train::sample_loss(m, s))));
    }
    {
        auto cfg = tiny_config();
        cfg.tied_pit = true;
        Rng rng(54);
        model::AdcssModel m(cfg, rng);
        REQUIRE(std::isfinite(ag::scalar_value(train::sample_loss(m, s))));
    }
}

TEST_CASE("training runs, checkpoints, and is deterministic in the seed") {
    auto train_ds = toy_dataset("fit_train", 4, 61);
    auto valid_ds = toy_dataset("fit_valid", 2, 62);

    const auto dir_a = temp_dir("fit_a");
    train::Trainer a(tiny_config(), toy_options(dir_a.string(), 2));
    const auto res_a = a.fit(train_ds, valid_ds);

    REQUIRE(res_a.history.size() == 2);
    for (const auto& st : res_a.history) {
        REQUIRE(std::isfinite(st.train_loss));
        REQUIRE(std::isfinite(st.valid_loss));
    }
    REQUIRE(std::filesystem::exists(dir_a / "phase1" / "best.ckpt"));
    REQUIRE(std::filesystem::exists(dir_a / "phase1" / "epoch_0001.ckpt"));
    REQUIRE(std::filesystem::exists(dir_a / "phase1" / "epoch_0002.ckpt"));

    const auto dir_b = temp_dir("fit_b");
    train::Trainer b(tiny_config(), toy_options(dir_b.string(), 2));
    const auto res_b = b.fit(train_ds, valid_ds);
    REQUIRE(res_b.history.size() == 2);
    for (size_t e = 0; e < 2; ++e) {
        REQUIRE(res_b.history[e].train_loss == res_a.history[e].train_loss);
        REQUIRE(res_b.history[e].valid_loss == res_a.history[e].valid_loss);
    }
    const auto& ia = a.model().params().items();
    const auto& ib = b.model().params().items();
    for (size_t i = 0; i < ia.size(); ++i) REQUIRE(same_bits(ia[i].second->value, ib[i].second->value));

    const auto dir_c = temp_dir("fit_c");
    auto opt_c = toy_options(dir_c.string(), 2);
    opt_c.seed = 8;
    train::Trainer c(tiny_config(), opt_c);
    const auto res_c = c.fit(train_ds, valid_ds);
    REQUIRE(res_c.history[0].train_loss != res_a.history[0].train_loss);
}

TEST_CASE("resume reproduces the uninterrupted run") {
    auto train_ds = toy_dataset("res_train", 4, 71);
    auto valid_ds = toy_dataset("res_valid", 2, 72);

    const auto dir_full = temp_dir("res_full");
    train::Trainer full(tiny_config(), toy_options(dir_full.string(), 4));
    const auto res_full = full.fit(train_ds, valid_ds);
    REQUIRE(res_full.history.size() == 4);

    const auto dir_half = temp_dir("res_half");
    train::Trainer half(tiny_config(), toy_options(dir_half.string(), 2));
    half.fit(train_ds, valid_ds);

    const auto ck = train::load_checkpoint((dir_half / "phase1" / "epoch_0002.ckpt").string());
    train::Trainer resumed(tiny_config(), toy_options(dir_half.string(), 4));
    train::apply_resume(resumed, ck);
    REQUIRE(resumed.epoch() == 2);
    const auto res_tail = resumed.fit(train_ds, valid_ds);

    REQUIRE(res_tail.history.size() == 2);
    for (size_t e = 0; e < 2; ++e) {
        REQUIRE(res_tail.history[e].epoch == res_full.history[e + 2].epoch);
        REQUIRE(res_tail.history[e].train_loss == res_full.history[e + 2].train_loss);
        REQUIRE(res_tail.history[e].valid_loss == res_full.history[e + 2].valid_loss);
    }
    const auto& fi = full.model().params().items();
    const auto& ri = resumed.model().params().items();
    for (size_t i = 0; i < fi.size(); ++i) REQUIRE(same_bits(fi[i].second->value, ri[i].second->value));
    REQUIRE(resumed.optimizer().steps() == full.optimizer().steps());
}

TEST_CASE("a checkpoint from another phase seeds parameters only") {
    auto train_ds = toy_dataset("warm_train", 2, 81);
    auto valid_ds = toy_dataset("warm_valid", 1, 82);

    const auto dir1 = temp_dir("warm_p1");
    train::Trainer p1(tiny_config(), toy_options(dir1.string(), 1));
    p1.fit(train_ds, valid_ds);
    const auto ck = train::load_checkpoint((dir1 / "phase1" / "epoch_0001.ckpt").string());

    auto opt2 = toy_options(temp_dir("warm_p2").string(), 1);
    opt2.phase = 2;
    opt2.lr = 1e-5;
    train::Trainer p2(tiny_config(), opt2);
    train::apply_resume(p2, ck);

    REQUIRE(p2.epoch() == 0);
    REQUIRE(p2.optimizer().steps() == 0);
    const auto& items = p2.model().params().items();
    for (size_t i = 0; i < items.size(); ++i)
        REQUIRE(same_bits(items[i].second->value, ck.params[i].second));
}

TEST_CASE("model round-trips through a checkpoint") {
    auto opt = toy_options(temp_dir("roundtrip").string(), 1);
    train::Trainer tr(tiny_config(), opt);
    const auto ck = tr.snapshot();
    const std::string path = (std::filesystem::path(opt.out_dir) / "snap.ckpt").string();
    train::save_checkpoint(path, ck);

    const auto back = train::load_checkpoint(path);
    const auto cfg = train::config_from_checkpoint(back);
    REQUIRE(cfg.frame_len == 16);
    REQUIRE(cfg.model_dim == 8);
    const auto m = train::model_from_checkpoint(back);
    const auto& src = tr.model().params().items();
    const auto& dst = m.params().items();
    REQUIRE(src.size() == dst.size());
    for (size_t i = 0; i < src.size(); ++i) {
        REQUIRE(src[i].first == dst[i].first);
        REQUIRE(same_bits(src[i].second->value, dst[i].second->value));
    }
}

TEST_CASE("oracle bypass scores perfectly") {
    auto ds = toy_dataset("oracle", 2, 91);
    const auto& item = ds.items[0];
    const int64_t hop = 8;
    const auto frames = static_cast<int64_t>(item.mixture.size()) / hop;
    const Tensor activity = metrics::rasterize_intervals(item.intervals, frames, hop, 16000);

    const auto rec = train::score_mixture(item.id, item.mixture, item.refs, item.intervals,
                                          item.refs, activity, frames, hop, 16000);
    REQUIRE(rec.ref_count == 2);
    REQUIRE(rec.est_count == 2);
    REQUIRE(rec.scored_refs == 2);
    REQUIRE(rec.der == 0.0);
    REQUIRE(rec.delta_si_sdr_db > 20.0); // hits the +30 dB clamp per channel
    REQUIRE(rec.warning.empty());

    metrics::EvalReport report;
    report.mixtures.push_back(rec);
    REQUIRE(report.counting_accuracy() == 1.0);
    REQUIRE(report.pooled_der() == 0.0);
}

TEST_CASE("evaluate runs an untrained model over a dataset") {
    auto ds = toy_dataset("eval", 3, 92);
    Rng rng(93);
    model::AdcssModel m(tiny_config(), rng);
    const auto report = train::evaluate(m, ds);

    REQUIRE(report.mixtures.size() == 3);
    for (const auto& rec : report.mixtures) {
        REQUIRE(rec.ref_count == 2);
        REQUIRE(rec.est_count >= 0); // inference never fails on valid audio
        REQUIRE(rec.der_total > 0);
    }
    const auto path = (temp_dir("eval_report") / "report.jsonl").string();
    metrics::write_report(path, report);
    const auto back = metrics::read_report(path);
    REQUIRE(back.mixtures.size() == 3);
}

TEST_CASE("train options parse phase-specific keys") {
    const std::string text = "config_version = 1\n"
                             "train_manifest = shared_train.jsonl\n"
                             "valid_manifest = shared_valid.jsonl\n"
                             "train_manifest_phase2 = mixed_train.jsonl\n"
                             "valid_manifest_phase2 = mixed_valid.jsonl\n"
                             "out_dir = /tmp/run\n"
                             "batch_size = 2\n"
                             "segment_s = 1.5\n"
                             "max_epochs = 12\n"
                             "patience = 3\n"
                             "train_seed = 99\n";
    {
        auto map = config::ConfigMap::from_text(text);
        (void)map.get_int("config_version", 1);
        const auto o = train::TrainOptions::from_config(map, 1);
        map.finish();
        REQUIRE(o.train_manifest == "shared_train.jsonl");
        REQUIRE(o.lr == 1e-3);
        REQUIRE(o.batch_size == 2);
        REQUIRE(o.segment_s == 1.5);
        REQUIRE(o.max_epochs == 12);
        REQUIRE(o.patience == 3);
        REQUIRE(o.seed == 99);
    }
    {
        auto map = config::ConfigMap::from_text(text);
        (void)map.get_int("config_version", 1);
        const auto o = train::TrainOptions::from_config(map, 2);
        map.finish();
        REQUIRE(o.train_manifest == "mixed_train.jsonl");
        REQUIRE(o.valid_manifest == "mixed_valid.jsonl");
        REQUIRE(o.lr == 1e-5);
    }
    {
        auto map = config::ConfigMap::from_text("out_dir = /tmp/run\n");
        REQUIRE_THROWS_AS(train::TrainOptions::from_config(map, 1), InvalidConfig);
    }
}
