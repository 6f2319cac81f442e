#include "arcopo/experiment.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "arcopo/errors.hpp"

namespace arcopo {

void ExperimentConfig::validate() const {
    dims.validate();
    sampler.validate();
    copo.validate();
    if (sequence_length < 1) throw std::invalid_argument("sequence_length must be >= 1");
    if (prompt_train_count < 1 || prompt_heldout_count < 1) {
        throw std::invalid_argument("prompt counts must be >= 1");
    }
    if (train_iterations < 0) throw std::invalid_argument("train.iterations must be >= 0");
    if (adapter_rank < 1) throw std::invalid_argument("adapter.rank must be >= 1");
    if (buffer_groups < 1) throw std::invalid_argument("semi.buffer_groups must be >= 1");
    if (semi_steps < 0) throw std::invalid_argument("semi.steps must be >= 0");
    if (sweep_scales.empty()) throw std::invalid_argument("sweep.scales must be non-empty");
    if (sweep_eval_rollouts < 1 || eval_rollouts < 1) {
        throw std::invalid_argument("eval rollout counts must be >= 1");
    }
    if (study_trials < 0) throw std::invalid_argument("study.trials must be >= 0");
    if (study_plans < 1) throw std::invalid_argument("study.plans must be >= 1");
    for (int p : study_pivots) {
        if (p < 1 || p > sequence_length) {
            throw std::invalid_argument("study.pivots must lie in 1..sequence_length");
        }
    }
    if (pretrain.steps < 0) throw std::invalid_argument("pretrain.steps must be >= 0");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad number for " + key + ": '" + value + "'");
    }
}

long long parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad integer for " + key + ": '" + value + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad unsigned integer for " + key + ": '" + value + "'");
    }
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) throw std::invalid_argument("config: empty list item in " + key);
        out.push_back(parse_double(key, item));
    }
    if (out.empty()) throw std::invalid_argument("config: empty list for " + key);
    return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    for (double v : parse_double_list(key, value)) out.push_back(static_cast<int>(v));
    return out;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string format_double_list(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += format_double(v[i]);
    }
    return out;
}

std::string format_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": empty key or value");
        }

        if (key == "root_seed") cfg.root_seed = parse_u64(key, value);
        else if (key == "out_dir") cfg.out_dir = value;
        else if (key == "sequence_length") cfg.sequence_length = static_cast<int>(parse_int(key, value));
        else if (key == "model.chunk_dim") cfg.dims.chunk_dim = static_cast<int>(parse_int(key, value));
        else if (key == "model.context_dim") cfg.dims.context_dim = static_cast<int>(parse_int(key, value));
        else if (key == "model.hidden1") cfg.dims.hidden1 = static_cast<int>(parse_int(key, value));
        else if (key == "model.hidden2") cfg.dims.hidden2 = static_cast<int>(parse_int(key, value));
        else if (key == "sampler.kind") {
            if (value == "consistency") cfg.sampler.kind = SamplerKind::consistency;
            else if (value == "flow_ode") cfg.sampler.kind = SamplerKind::flow_ode;
            else throw std::invalid_argument("config: unknown sampler.kind '" + value + "'");
        }
        else if (key == "sampler.timesteps") cfg.sampler.timesteps = parse_double_list(key, value);
        else if (key == "copo.clip_eps") cfg.copo.clip_eps = parse_double(key, value);
        else if (key == "copo.tau") cfg.copo.tau = parse_double(key, value);
        else if (key == "copo.tau0") cfg.copo.tau0 = parse_double(key, value);
        else if (key == "copo.tau_auto_scale") cfg.copo.tau_auto_scale = parse_double(key, value);
        else if (key == "copo.learning_rate") cfg.copo.learning_rate = parse_double(key, value);
        else if (key == "copo.group_size") cfg.copo.group_size = static_cast<int>(parse_int(key, value));
        else if (key == "copo.sigma") cfg.copo.sigma = parse_double(key, value);
        else if (key == "copo.anchor_batch") cfg.copo.anchor_batch = static_cast<int>(parse_int(key, value));
        else if (key == "copo.update_steps") cfg.copo.update_steps = static_cast<int>(parse_int(key, value));
        else if (key == "copo.degenerate_std_threshold") cfg.copo.degenerate_std_threshold = parse_double(key, value);
        else if (key == "copo.grad_clip") cfg.copo.grad_clip = parse_double(key, value);
        else if (key == "copo.fm_distance_step") cfg.copo.fm_distance_step = static_cast<int>(parse_int(key, value));
        else if (key == "reward.kind") cfg.reward.kind = reward_kind_from_string(value);
        else if (key == "reward.weight_align") cfg.reward.weight_align = parse_double(key, value);
        else if (key == "reward.weight_motion") cfg.reward.weight_motion = parse_double(key, value);
        else if (key == "reward.weight_quality") cfg.reward.weight_quality = parse_double(key, value);
        else if (key == "reward.step_target") cfg.reward.step_target = parse_double(key, value);
        else if (key == "reward.norm_target") cfg.reward.norm_target = parse_double(key, value);
        else if (key == "prompts.train_count") cfg.prompt_train_count = static_cast<int>(parse_int(key, value));
        else if (key == "prompts.heldout_count") cfg.prompt_heldout_count = static_cast<int>(parse_int(key, value));
        else if (key == "prompts.scale") cfg.prompt_scale = parse_double(key, value);
        else if (key == "pretrain.data_seed") cfg.pretrain.data_seed = parse_u64(key, value);
        else if (key == "pretrain.steps") cfg.pretrain.steps = static_cast<int>(parse_int(key, value));
        else if (key == "pretrain.learning_rate") cfg.pretrain.learning_rate = parse_double(key, value);
        else if (key == "pretrain.mix_mean") cfg.pretrain.mix_mean = parse_double(key, value);
        else if (key == "pretrain.mix_std") cfg.pretrain.mix_std = parse_double(key, value);
        else if (key == "pretrain.first_chunk_scale") cfg.pretrain.first_chunk_scale = parse_double(key, value);
        else if (key == "pretrain.eval_sequences") cfg.pretrain.eval_sequences = static_cast<int>(parse_int(key, value));
        else if (key == "train.iterations") cfg.train_iterations = static_cast<int>(parse_int(key, value));
        else if (key == "train.plan_cycle") cfg.train_plan_cycle = static_cast<int>(parse_int(key, value));
        else if (key == "adapter.rank") cfg.adapter_rank = static_cast<int>(parse_int(key, value));
        else if (key == "adapter.alpha") cfg.adapter_alpha = parse_double(key, value);
        else if (key == "adapter.init_scale") cfg.adapter_init_scale = parse_double(key, value);
        else if (key == "semi.buffer_groups") cfg.buffer_groups = static_cast<int>(parse_int(key, value));
        else if (key == "semi.steps") cfg.semi_steps = static_cast<int>(parse_int(key, value));
        else if (key == "sweep.scales") cfg.sweep_scales = parse_double_list(key, value);
        else if (key == "sweep.eval_rollouts") cfg.sweep_eval_rollouts = static_cast<int>(parse_int(key, value));
        else if (key == "sweep.heldout_tolerance") cfg.sweep_heldout_tolerance = parse_double(key, value);
        else if (key == "study.trials") cfg.study_trials = static_cast<int>(parse_int(key, value));
        else if (key == "study.plans") cfg.study_plans = static_cast<int>(parse_int(key, value));
        else if (key == "study.pivots") cfg.study_pivots = parse_int_list(key, value);
        else if (key == "eval.rollouts") cfg.eval_rollouts = static_cast<int>(parse_int(key, value));
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    // pretrain sequence/prompt settings track the experiment's
    cfg.pretrain.sequence_length = cfg.sequence_length;
    cfg.pretrain.prompt_scale = cfg.prompt_scale;
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw NotFoundError("config file not found: " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["root_seed"] = std::to_string(cfg.root_seed);
    kv["out_dir"] = cfg.out_dir;
    kv["sequence_length"] = std::to_string(cfg.sequence_length);
    kv["model.chunk_dim"] = std::to_string(cfg.dims.chunk_dim);
    kv["model.context_dim"] = std::to_string(cfg.dims.context_dim);
    kv["model.hidden1"] = std::to_string(cfg.dims.hidden1);
    kv["model.hidden2"] = std::to_string(cfg.dims.hidden2);
    kv["sampler.kind"] = cfg.sampler.kind == SamplerKind::consistency ? "consistency" : "flow_ode";
    kv["sampler.timesteps"] = format_double_list(cfg.sampler.timesteps);
    kv["copo.clip_eps"] = format_double(cfg.copo.clip_eps);
    kv["copo.tau"] = format_double(cfg.copo.tau);
    kv["copo.tau0"] = format_double(cfg.copo.tau0);
    kv["copo.tau_auto_scale"] = format_double(cfg.copo.tau_auto_scale);
    kv["copo.learning_rate"] = format_double(cfg.copo.learning_rate);
    kv["copo.group_size"] = std::to_string(cfg.copo.group_size);
    kv["copo.sigma"] = format_double(cfg.copo.sigma);
    kv["copo.anchor_batch"] = std::to_string(cfg.copo.anchor_batch);
    kv["copo.update_steps"] = std::to_string(cfg.copo.update_steps);
    kv["copo.degenerate_std_threshold"] = format_double(cfg.copo.degenerate_std_threshold);
    kv["copo.grad_clip"] = format_double(cfg.copo.grad_clip);
    kv["copo.fm_distance_step"] = std::to_string(cfg.copo.fm_distance_step);
    kv["reward.kind"] = to_string(cfg.reward.kind);
    kv["reward.weight_align"] = format_double(cfg.reward.weight_align);
    kv["reward.weight_motion"] = format_double(cfg.reward.weight_motion);
    kv["reward.weight_quality"] = format_double(cfg.reward.weight_quality);
    kv["reward.step_target"] = format_double(cfg.reward.step_target);
    kv["reward.norm_target"] = format_double(cfg.reward.norm_target);
    kv["prompts.train_count"] = std::to_string(cfg.prompt_train_count);
    kv["prompts.heldout_count"] = std::to_string(cfg.prompt_heldout_count);
    kv["prompts.scale"] = format_double(cfg.prompt_scale);
    kv["pretrain.data_seed"] = std::to_string(cfg.pretrain.data_seed);
    kv["pretrain.steps"] = std::to_string(cfg.pretrain.steps);
    kv["pretrain.learning_rate"] = format_double(cfg.pretrain.learning_rate);
    kv["pretrain.mix_mean"] = format_double(cfg.pretrain.mix_mean);
    kv["pretrain.mix_std"] = format_double(cfg.pretrain.mix_std);
    kv["pretrain.first_chunk_scale"] = format_double(cfg.pretrain.first_chunk_scale);
    kv["pretrain.eval_sequences"] = std::to_string(cfg.pretrain.eval_sequences);
    kv["train.iterations"] = std::to_string(cfg.train_iterations);
    kv["train.plan_cycle"] = std::to_string(cfg.train_plan_cycle);
    kv["adapter.rank"] = std::to_string(cfg.adapter_rank);
    kv["adapter.alpha"] = format_double(cfg.adapter_alpha);
    kv["adapter.init_scale"] = format_double(cfg.adapter_init_scale);
    kv["semi.buffer_groups"] = std::to_string(cfg.buffer_groups);
    kv["semi.steps"] = std::to_string(cfg.semi_steps);
    kv["sweep.scales"] = format_double_list(cfg.sweep_scales);
    kv["sweep.eval_rollouts"] = std::to_string(cfg.sweep_eval_rollouts);
    kv["sweep.heldout_tolerance"] = format_double(cfg.sweep_heldout_tolerance);
    kv["study.trials"] = std::to_string(cfg.study_trials);
    kv["study.plans"] = std::to_string(cfg.study_plans);
    kv["study.pivots"] = format_int_list(cfg.study_pivots);
    kv["eval.rollouts"] = std::to_string(cfg.eval_rollouts);

    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
    const std::string text = serialize_config(cfg);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::string example_config_text() {
    ExperimentConfig cfg;
    std::string out =
        "# arcopo experiment configuration (all keys with their defaults)\n"
        "# Unknown keys are rejected; '#' starts a comment.\n";
    out += serialize_config(cfg);
    return out;
}

}  // namespace arcopo
