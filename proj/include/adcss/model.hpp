#pragma once

// The full separation model: learned encoder, dual-path embedding network,
// attractor module, FiLM-conditioned triple-path separator, and learned
// decoder, owned by one parameter registry.

#include <string>
#include <vector>

#include "adcss/attractor.hpp"
#include "adcss/config.hpp"
#include "adcss/embedding.hpp"
#include "adcss/frontend.hpp"
#include "adcss/objectives.hpp"
#include "adcss/separator.hpp"

namespace adcss::model {

namespace ag = adcss::ag;
namespace fe = adcss::frontend;

struct ModelConfig {
    int64_t frame_len = 16;  // encoder kernel, stride frame_len / 2
    int64_t feat_dim = 256;  // F
    int64_t model_dim = 256; // D
    int64_t chunk_len = 96;  // K
    int64_t num_heads = 4;
    int64_t depth_dual = 2;
    int64_t n_triple = 6;
    int64_t j_max = 4;
    double tau_exist = 0.5;
    double tau_diar = 0.5;
    objectives::LossWeights weights;
    attractor::HeadStyle attractor_style = attractor::HeadStyle::rnn;
    bool diar_branch = true;
    bool pos_enc = true;
    bool tied_pit = false;
    bool attractor_enabled = true;
    int64_t fixed_j = 2; // speaker count when the attractor module is disabled
    int sample_rate = 16000;

    void validate() const {
        ADCSS_CHECK_CONFIG(frame_len >= 2 && frame_len % 2 == 0, "model: frame_len must be even and >= 2");
        ADCSS_CHECK_CONFIG(feat_dim >= 1 && model_dim >= 1, "model: feature dims must be positive");
        ADCSS_CHECK_CONFIG(num_heads >= 1 && model_dim % num_heads == 0,
                           "model: num_heads must divide model_dim");
        ADCSS_CHECK_CONFIG(chunk_len >= 2 && chunk_len % 2 == 0, "model: chunk_len must be even and >= 2");
        ADCSS_CHECK_CONFIG(depth_dual >= 1, "model: depth_dual must be >= 1");
        ADCSS_CHECK_CONFIG(n_triple >= 1, "model: n_triple must be >= 1");
        ADCSS_CHECK_CONFIG(j_max >= 1, "model: j_max must be >= 1");
        ADCSS_CHECK_CONFIG(tau_exist > 0.0 && tau_exist < 1.0, "model: tau_exist must lie in (0, 1)");
        ADCSS_CHECK_CONFIG(tau_diar > 0.0 && tau_diar < 1.0, "model: tau_diar must lie in (0, 1)");
        ADCSS_CHECK_CONFIG(fixed_j >= 1, "model: fixed_j must be >= 1");
        ADCSS_CHECK_CONFIG(sample_rate >= 1, "model: sample_rate must be positive");
        weights.validate();
    }

    static ModelConfig from_config(const config::ConfigMap& map) {
        ModelConfig cfg;
        cfg.frame_len = map.get_int("frame_len", cfg.frame_len);
        cfg.feat_dim = map.get_int("feat_dim", cfg.feat_dim);
        cfg.model_dim = map.get_int("model_dim", cfg.model_dim);
        cfg.chunk_len = map.get_int("chunk_len", cfg.chunk_len);
        cfg.num_heads = map.get_int("num_heads", cfg.num_heads);
        cfg.depth_dual = map.get_int("depth_dual", cfg.depth_dual);
        cfg.n_triple = map.get_int("n_triple", cfg.n_triple);
        cfg.j_max = map.get_int("j_max", cfg.j_max);
        cfg.tau_exist = map.get_double("tau_exist", cfg.tau_exist);
        cfg.tau_diar = map.get_double("tau_diar", cfg.tau_diar);
        cfg.weights.lambda_s = map.get_double("lambda_s", cfg.weights.lambda_s);
        cfg.weights.lambda_d = map.get_double("lambda_d", cfg.weights.lambda_d);
        cfg.weights.lambda_e = map.get_double("lambda_e", cfg.weights.lambda_e);
        cfg.attractor_style =
            attractor::head_style_from_string(map.get_string("attractor_style", "rnn"));
        cfg.diar_branch = map.get_bool("diar_branch", cfg.diar_branch);
        cfg.pos_enc = map.get_bool("pos_enc", cfg.pos_enc);
        cfg.tied_pit = map.get_bool("tied_pit", cfg.tied_pit);
        cfg.attractor_enabled = map.get_bool("attractor_enabled", cfg.attractor_enabled);
        cfg.fixed_j = map.get_int("fixed_j", cfg.fixed_j);
        cfg.sample_rate = static_cast<int>(map.get_int("sample_rate", cfg.sample_rate));
        cfg.validate();
        return cfg;
    }

    void to_writer(config::ConfigWriter& w) const {
        w.add("frame_len", frame_len);
        w.add("feat_dim", feat_dim);
        w.add("model_dim", model_dim);
        w.add("chunk_len", chunk_len);
        w.add("num_heads", num_heads);
        w.add("depth_dual", depth_dual);
        w.add("n_triple", n_triple);
        w.add("j_max", j_max);
        w.add("tau_exist", tau_exist);
        w.add("tau_diar", tau_diar);
        w.add("lambda_s", weights.lambda_s);
        w.add("lambda_d", weights.lambda_d);
        w.add("lambda_e", weights.lambda_e);
        w.add("attractor_style",
              attractor_style == attractor::HeadStyle::rnn ? "rnn" : "transformer");
        w.add("diar_branch", diar_branch);
        w.add("pos_enc", pos_enc);
        w.add("tied_pit", tied_pit);
        w.add("attractor_enabled", attractor_enabled);
        w.add("fixed_j", fixed_j);
        w.add("sample_rate", static_cast<int64_t>(sample_rate));
    }
};

class AdcssModel {
public:
    AdcssModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        encoder_ = fe::EncoderParams(reg_, "encoder", cfg_.frame_len, cfg_.feat_dim, rng);
        embed::DualPathConfig dp;
        dp.depth_dual = cfg_.depth_dual;
        dp.num_heads = cfg_.num_heads;
        dp.K = cfg_.chunk_len;
        dp.pos_enc = cfg_.pos_enc;
        embedding_ = embed::EmbeddingNet(reg_, "embedding", cfg_.feat_dim, cfg_.model_dim, dp, rng);
        if (cfg_.attractor_enabled)
            attractor_ = attractor::AttractorNet(reg_, "attractor", cfg_.model_dim, cfg_.j_max,
                                                 cfg_.num_heads, 4 * cfg_.model_dim,
                                                 cfg_.attractor_style, rng);
        separator_ = separator::SeparatorNet(reg_, "separator", cfg_.model_dim, cfg_.feat_dim,
                                             cfg_.n_triple, cfg_.num_heads, 4 * cfg_.model_dim,
                                             rng);
        decoder_ = fe::DecoderParams(reg_, "decoder", cfg_.feat_dim, cfg_.frame_len, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    nn::ParamRegistry& params() { return reg_; }
    const nn::ParamRegistry& params() const { return reg_; }

    // Longest prefix of n samples the frontend reproduces exactly: whole
    // frames at stride frame_len / 2.
    int64_t usable_length(int64_t n) const {
        const int64_t hop = cfg_.frame_len / 2;
        if (n < cfg_.frame_len) return 0;
        return cfg_.frame_len + ((n - cfg_.frame_len) / hop) * hop;
    }

    struct TrainForward {
        std::vector<ag::Var> waveforms; // C estimates, each of trimmed_len samples
        ag::Var activity;               // [C, T] probabilities; null without the branch
        ag::Var existence;              // [C + 1]; null when the attractor is disabled
        int64_t trimmed_len = 0;
        int64_t frames = 0;
        int64_t frame_hop = 0;
    };

    // Training pass at the true speaker count.
    TrainForward forward_train(const std::vector<double>& mixture, int64_t C) const {
        ADCSS_CHECK_INPUT(C >= 1, "forward_train: need at least one speaker");
        if (cfg_.attractor_enabled)
            ADCSS_CHECK_INPUT(C <= cfg_.j_max, "forward_train: speaker count exceeds j_max");

        TrainForward out;
        auto emb = run_frontend(mixture, out.trimmed_len);
        out.frames = emb.d->value.dim(0);
        out.frame_hop = cfg_.frame_len / 2;

        ag::Var t_in;
        if (cfg_.attractor_enabled) {
            const auto attr = attractor_.generate_attractors(emb.d, C);
            out.existence = attr.existence;
            if (cfg_.diar_branch) out.activity = attractor_.diarize(attr, emb.d, C);
            t_in = attractor_.film_condition(emb.d_out, attr, C);
        } else {
            // Ablation: every speaker path sees the same unconditioned features.
            t_in = ag::add(ag::constant(Tensor::zeros({C, 1, 1, 1})), emb.d_out.values);
        }
        out.waveforms = separator_.separate(t_in, emb.d_out, decoder_);
        return out;
    }

    struct Inference {
        int64_t count = 0;                          // estimated speaker count
        std::vector<std::vector<double>> waveforms; // count estimates, input length
        Tensor activity;                            // [count, T] binary
        Tensor existence;                           // [j_max + 1] probabilities
        int64_t frames = 0;
        int64_t frame_hop = 0;
        bool empty_warning = false; // no attractor crossed the threshold
    };

    // Full-sequence inference with speaker counting.
    Inference infer(const std::vector<double>& mixture) const {
        ag::NoGradGuard guard;
        Inference out;
        int64_t trimmed = 0;
        auto emb = run_frontend(mixture, trimmed);
        out.frames = emb.d->value.dim(0);
        out.frame_hop = cfg_.frame_len / 2;

        if (!cfg_.attractor_enabled) {
            out.count = cfg_.fixed_j;
            const ag::Var t_in =
                ag::add(ag::constant(Tensor::zeros({cfg_.fixed_j, 1, 1, 1})), emb.d_out.values);
            collect_waveforms(separator_.separate(t_in, emb.d_out, decoder_),
                              static_cast<int64_t>(mixture.size()), out);
            out.activity = Tensor::zeros({cfg_.fixed_j, out.frames});
            return out;
        }

        const auto attr = attractor_.generate_attractors(emb.d, cfg_.j_max);
        out.existence = attr.existence->value;
        out.count = attractor::count_speakers(out.existence, cfg_.tau_exist, cfg_.j_max);
        if (out.count == 0) {
            out.empty_warning = true;
            out.activity = Tensor::zeros({0, out.frames});
            return out;
        }

        if (cfg_.diar_branch) {
            const ag::Var probs = attractor_.diarize(attr, emb.d, out.count);
            out.activity = attractor::binarize(probs->value, cfg_.tau_diar);
        } else {
            out.activity = Tensor::zeros({out.count, out.frames});
        }
        const ag::Var t_in = attractor_.film_condition(emb.d_out, attr, out.count);
        collect_waveforms(separator_.separate(t_in, emb.d_out, decoder_),
                          static_cast<int64_t>(mixture.size()), out);
        return out;
    }

private:
    embed::EmbeddingNet::Output run_frontend(const std::vector<double>& mixture,
                                             int64_t& trimmed_len) const {
        ADCSS_CHECK_INPUT(static_cast<int64_t>(mixture.size()) >= cfg_.frame_len,
                          "model: input shorter than one encoder frame");
        trimmed_len = usable_length(static_cast<int64_t>(mixture.size()));
        wavio::Waveform w;
        w.sample_rate = cfg_.sample_rate;
        w.samples.assign(mixture.begin(), mixture.begin() + trimmed_len);
        const auto fm = fe::encode(w, encoder_);
        return embedding_.embed(fm);
    }

    // Copies estimates out of the graph, zero-padded to the input length.
    static void collect_waveforms(const std::vector<ag::Var>& waves, int64_t input_len,
                                  Inference& out) {
        for (const auto& w : waves) {
            std::vector<double> samples(w->value.data(), w->value.data() + w->value.numel());
            samples.resize(static_cast<size_t>(input_len), 0.0);
            out.waveforms.push_back(std::move(samples));
        }
    }

    ModelConfig cfg_;
    nn::ParamRegistry reg_;
    fe::EncoderParams encoder_;
    fe::DecoderParams decoder_;
    embed::EmbeddingNet embedding_;
    attractor::AttractorNet attractor_;
    separator::SeparatorNet separator_;
};

} // namespace adcss::model
