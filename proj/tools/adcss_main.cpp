// Command-line front end: dataset synthesis, two-phase training, manifest
// evaluation, and single-file inference over the adcss library.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "adcss/config.hpp"
#include "adcss/forge.hpp"
#include "adcss/metrics.hpp"
#include "adcss/model.hpp"
#include "adcss/train.hpp"
#include "adcss/wav.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Only the CPU backend exists; anything else in ADCSS_DEVICE is a user error.
void check_device() {
    const char* dev = std::getenv("ADCSS_DEVICE");
    if (dev != nullptr && std::string(dev) != "cpu")
        throw adcss::InvalidConfig(std::string("ADCSS_DEVICE: unsupported device '") + dev +
                                   "', only 'cpu' is available");
}

void apply_thread_limit() {
    const char* raw = std::getenv("ADCSS_NUM_THREADS");
    if (raw == nullptr) return;
    int threads = 0;
    try {
        size_t pos = 0;
        threads = std::stoi(raw, &pos);
        if (pos != std::string(raw).size()) threads = 0;
    } catch (const std::logic_error&) {
        threads = 0;
    }
    if (threads < 1)
        throw adcss::InvalidConfig(std::string("ADCSS_NUM_THREADS: expected a positive integer, got '") +
                                   raw + "'");
    Eigen::setNbThreads(threads);
}

int run_synth(const std::string& config_path, const std::string& out_dir) {
    auto map = adcss::config::load_config(config_path);
    const std::string kind = map.get_string("corpus", "toy");
    std::unique_ptr<adcss::forge::UtteranceProvider> corpus;
    if (kind == "toy") {
        corpus = std::make_unique<adcss::forge::ToyCorpus>(
            adcss::forge::ToyCorpusConfig::from_config(map));
    } else if (kind == "wavdir") {
        corpus = std::make_unique<adcss::forge::WavDirCorpus>(map.require_string("corpus_dir"));
    } else {
        throw adcss::InvalidConfig("synth: unknown corpus '" + kind + "' (toy or wavdir)");
    }
    const auto fc = adcss::forge::ForgeConfig::from_config(map);
    map.finish();

    const auto manifest = adcss::forge::build_dataset(*corpus, fc, out_dir);
    std::cout << "wrote " << manifest.records.size() << " "
              << adcss::forge::to_string(fc.condition) << " mixtures\n"
              << "manifest: " << (fs::path(out_dir) / "manifest.jsonl").string() << "\n";
    return 0;
}

int run_train(const std::string& config_path, int64_t phase, const std::string& resume) {
    auto map = adcss::config::load_config(config_path);
    const auto model_cfg = adcss::model::ModelConfig::from_config(map);
    const auto opts = adcss::train::TrainOptions::from_config(map, phase);
    map.finish();

    adcss::train::Trainer trainer(model_cfg, opts);
    if (!resume.empty()) {
        const auto ck = adcss::train::load_checkpoint(resume);
        adcss::train::apply_resume(trainer, ck);
        std::cout << (ck.phase == phase ? "resumed at epoch " + std::to_string(trainer.epoch())
                                        : "warm start from phase " + std::to_string(ck.phase))
                  << "\n";
    }
    const auto train_ds = adcss::train::load_dataset(opts.train_manifest);
    const auto valid_ds = adcss::train::load_dataset(opts.valid_manifest);
    std::cout << "phase " << phase << ": " << train_ds.items.size() << " train / "
              << valid_ds.items.size() << " valid mixtures, lr " << opts.lr << "\n";

    const auto res = trainer.fit(train_ds, valid_ds, &std::cout);
    std::cout << "best validation loss " << res.best_valid << "\n"
              << "best checkpoint: " << res.best_path << "\n";
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& report_path) {
    const auto ck = adcss::train::load_checkpoint(ckpt_path);
    const auto model = adcss::train::model_from_checkpoint(ck);
    const auto ds = adcss::train::load_dataset(manifest_path);
    const auto report = adcss::train::evaluate(model, ds);
    adcss::metrics::write_report(report_path, report);
    std::cout << "evaluated " << report.mixtures.size() << " mixtures\n"
              << "delta_si_sdr_db " << report.mean_delta_si_sdr_db() << "\n"
              << "der " << report.pooled_der() << "\n"
              << "sca " << report.counting_accuracy() << "\n"
              << "report: " << report_path << "\n";
    return 0;
}

int run_infer(const std::string& ckpt_path, const std::string& wav_path,
              const std::string& out_dir) {
    const auto ck = adcss::train::load_checkpoint(ckpt_path);
    const auto model = adcss::train::model_from_checkpoint(ck);
    const auto wave = adcss::wavio::read_wav(wav_path);
    ADCSS_CHECK_INPUT(wave.sample_rate == model.config().sample_rate,
                      "infer: sample rate differs from the model configuration");

    const auto inf = model.infer(wave.samples);
    fs::create_directories(out_dir);
    json meta;
    meta["count"] = inf.count;
    meta["existence"] = std::vector<double>(inf.existence.data(),
                                            inf.existence.data() + inf.existence.numel());
    meta["frames"] = inf.frames;
    meta["frame_hop"] = inf.frame_hop;
    meta["warning"] = inf.empty_warning;
    meta["sources"] = json::array();
    meta["activity"] = json::array();
    for (int64_t c = 0; c < inf.count; ++c) {
        char name[32];
        std::snprintf(name, sizeof(name), "est_%02lld.wav", static_cast<long long>(c + 1));
        adcss::wavio::write_wav((fs::path(out_dir) / name).string(),
                                {inf.waveforms[static_cast<size_t>(c)], wave.sample_rate});
        meta["sources"].push_back(name);
        std::vector<int> row(static_cast<size_t>(inf.frames));
        for (int64_t t = 0; t < inf.frames; ++t)
            row[static_cast<size_t>(t)] = inf.activity.at({c, t}) != 0.0 ? 1 : 0;
        meta["activity"].push_back(row);
    }
    std::ofstream((fs::path(out_dir) / "inference.json").string()) << meta.dump(2) << "\n";

    if (inf.empty_warning)
        std::cerr << "warning: no attractor crossed the existence threshold; no sources written\n";
    std::cout << "estimated " << inf.count << " speaker(s); outputs in " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attractor-based joint diarization, counting, and separation"};
    app.require_subcommand(1);

    std::string synth_config, synth_out;
    auto* synth = app.add_subcommand("synth", "Generate a mixture dataset");
    synth->add_option("--config", synth_config, "Flat key-value config file")->required();
    synth->add_option("--out", synth_out, "Output dataset directory")->required();

    std::string train_config, train_resume;
    int64_t train_phase = 0;
    auto* train = app.add_subcommand("train", "Run one training phase");
    train->add_option("--config", train_config, "Flat key-value config file")->required();
    train->add_option("--phase", train_phase, "Training phase")->required()->check(CLI::Range(1, 2));
    train->add_option("--resume", train_resume, "Checkpoint to resume or warm-start from");

    std::string eval_ckpt, eval_manifest, eval_report;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    eval->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
    eval->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
    eval->add_option("--report", eval_report, "Report file to write")->required();

    std::string infer_ckpt, infer_wav, infer_out;
    auto* infer = app.add_subcommand("infer", "Separate one mixture file");
    infer->add_option("--ckpt", infer_ckpt, "Checkpoint file")->required();
    infer->add_option("--wav", infer_wav, "Input mixture (16 kHz mono)")->required();
    infer->add_option("--out", infer_out, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        check_device();
        apply_thread_limit();
        if (synth->parsed()) return run_synth(synth_config, synth_out);
        if (train->parsed()) return run_train(train_config, train_phase, train_resume);
        if (eval->parsed()) return run_eval(eval_ckpt, eval_manifest, eval_report);
        if (infer->parsed()) return run_infer(infer_ckpt, infer_wav, infer_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
