#pragma once

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kiunet/data.hpp"
#include "kiunet/errors.hpp"
#include "kiunet/metrics.hpp"
#include "kiunet/network.hpp"
#include "kiunet/receptive_field.hpp"
#include "kiunet/serialization.hpp"
#include "kiunet/training.hpp"

namespace kiunet::cli {

namespace fs = std::filesystem;

inline const CLI::Validator positive_integer(
    [](std::string& v) -> std::string {
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos || v.find_first_not_of('0') == std::string::npos) {
            return "must be a positive integer, got '" + v + "'";
        }
        return {};
    },
    "POSITIVE");

inline std::vector<std::size_t> parse_widths(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            const long v = std::stol(item, &pos);
            if (pos != item.size() || v <= 0) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ConfigError("invalid --widths entry '" + item + "' (expected comma-separated positive integers)");
        }
    }
    if (out.empty()) throw ConfigError("--widths must list at least one channel count");
    return out;
}

/// `key = value` lines, `#` starts a comment. Keys are long option names
/// without the leading dashes.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path.string());
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string{};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

/// Fills options not given on the command line from the config file.
inline void apply_config(CLI::App& sub, const std::string& config_path) {
    if (config_path.empty()) return;
    for (const auto& [key, value] : read_config_file(config_path)) {
        CLI::Option* opt = sub.get_option_no_throw("--" + key);
        if (opt == nullptr || key == "config" || key == "help") {
            throw ConfigError("unknown config key '" + key + "' for command " + sub.get_name());
        }
        if (opt->count() > 0) continue;  // flags win
        opt->clear();
        opt->add_result(value);
        opt->run_callback();
    }
}

/// The fully resolved command line, suitable for re-running the command.
inline std::string effective_config(const CLI::App& app, const CLI::App& sub) {
    std::ostringstream os;
    os << "effective config: " << app.get_name();
    auto emit = [&os](const CLI::App& a) {
        for (const CLI::Option* opt : a.get_options()) {
            const std::string name = opt->get_single_name();
            if (name.empty() || name == "help" || name == "config") continue;
            if (opt->get_expected_min() == 0) {
                if (opt->count() > 0) os << " --" << name;
                continue;
            }
            std::string value;
            if (opt->count() > 0) {
                const auto& r = opt->results();
                for (std::size_t i = 0; i < r.size(); ++i) value += (i ? "," : "") + r[i];
            } else {
                value = opt->get_default_str();
            }
            if (value.empty()) continue;
            os << " --" << name << "=" << value;
        }
    };
    emit(app);
    os << " " << sub.get_name();
    emit(sub);
    return os.str();
}

struct NetworkFlags {
    std::string variant = "kiunet";
    std::string widths = "32,64,128";
    std::size_t depth = 3;
    CLI::Option* depth_opt = nullptr;
    CLI::Option* widths_opt = nullptr;

    void add_to(CLI::App& sub, const std::string& default_variant) {
        variant = default_variant;
        sub.add_option("--variant", variant, "one of: " + variant_names_list());
        widths_opt = sub.add_option("--widths", widths, "comma-separated channel widths per block");
        depth_opt = sub.add_option("--depth", depth, "encoder/decoder blocks per branch (default: number of widths)");
    }

    /// Depth follows the widths list unless given explicitly.
    void resolve() {
        if (depth_opt->count() == 0) {
            depth = parse_widths(widths).size();
            depth_opt->clear();
            depth_opt->add_result(std::to_string(depth));
        }
    }

    NetworkVariant parsed_variant() const { return parse_variant(variant); }
    std::vector<std::size_t> parsed_widths() const { return parse_widths(widths); }
};

/// Runs the `kiunet` command line. Diagnostics go to `err`, machine-readable
/// results to `out` (or to files). Returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"KiU-Net segmentation toolkit", "kiunet"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.fallthrough();

    int threads = 0;
    app.add_option("--threads", threads, "worker thread cap (0: machine parallelism)")->check(CLI::NonNegativeNumber);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic small-structure dataset");
    data::SynthConfig synth;
    std::string gen_out, gen_config;
    double train_fraction = 0.8;
    std::uint64_t split_seed = 0;
    std::size_t folds = 1;
    gen->add_option("--out", gen_out, "output dataset directory");
    gen->add_option("--count", synth.count, "number of samples")->check(positive_integer);
    gen->add_option("--size", synth.image_size, "image side length in px");
    gen->add_option("--seed", synth.seed, "generator seed");
    gen->add_option("--train-fraction", train_fraction, "fraction of samples in the train split");
    auto* split_seed_opt = gen->add_option("--split-seed", split_seed, "split seed (default: --seed)");
    gen->add_option("--folds", folds, "number of split manifests to emit")->check(positive_integer);
    gen->add_option("--min-ellipses", synth.min_ellipses);
    gen->add_option("--max-ellipses", synth.max_ellipses);
    gen->add_option("--min-radius", synth.min_radius);
    gen->add_option("--max-radius", synth.max_radius);
    gen->add_option("--min-curves", synth.min_curves);
    gen->add_option("--max-curves", synth.max_curves);
    gen->add_option("--min-curve-width", synth.min_curve_width);
    gen->add_option("--max-curve-width", synth.max_curve_width);
    gen->add_option("--min-sigma", synth.min_sigma);
    gen->add_option("--max-sigma", synth.max_sigma);
    gen->add_option("--speckle", synth.speckle, "multiplicative speckle strength");
    gen->add_option("--min-foreground", synth.min_foreground);
    gen->add_option("--max-foreground", synth.max_foreground);
    gen->add_option("--config", gen_config, "key = value config file (flags take precedence)");

    // train
    auto* trn = app.add_subcommand("train", "train a network variant");
    NetworkFlags trn_net;
    trn_net.add_to(*trn, "kiunet");
    TrainConfig tcfg;
    std::string trn_data, trn_manifest = "manifest.tsv", trn_out, trn_config, precision = "single";
    bool no_timing = false;
    trn->add_option("--data", trn_data, "dataset directory");
    trn->add_option("--manifest", trn_manifest, "manifest file name inside the dataset directory");
    trn->add_option("--out", trn_out, "output directory for checkpoints and history");
    trn->add_option("--epochs", tcfg.epochs);
    trn->add_option("--lr", tcfg.learning_rate);
    trn->add_option("--batch-size", tcfg.batch_size);
    trn->add_option("--seed", tcfg.seed, "initialization and shuffling seed");
    trn->add_option("--eval-every", tcfg.eval_every, "validate every N epochs");
    trn->add_option("--threshold", tcfg.threshold, "binarization threshold for validation Dice");
    trn->add_option("--beta1", tcfg.adam_beta1);
    trn->add_option("--beta2", tcfg.adam_beta2);
    trn->add_option("--adam-eps", tcfg.adam_epsilon);
    trn->add_option("--precision", precision, "single or double")->check(CLI::IsMember({"single", "double"}));
    trn->add_flag("--no-timing", no_timing, "write 0 in the seconds column (byte-reproducible history)");
    trn->add_option("--config", trn_config, "key = value config file (flags take precedence)");

    // eval
    auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    NetworkFlags evl_net;
    evl_net.add_to(*evl, "kiunet");
    std::string evl_ckpt, evl_data, evl_split = "test", evl_out = "-", evl_config;
    std::vector<std::string> evl_manifests{"manifest.tsv"};
    double evl_threshold = 0.5;
    evl->add_option("--checkpoint", evl_ckpt, "KIUC checkpoint");
    evl->add_option("--data", evl_data, "dataset directory");
    evl->add_option("--manifest", evl_manifests, "manifest file(s); several are aggregated as folds")->delimiter(',');
    evl->add_option("--split", evl_split)->check(CLI::IsMember({"train", "test", "all"}));
    evl->add_option("--threshold", evl_threshold);
    evl->add_option("--out", evl_out, "CSV report path ('-' for stdout)");
    evl->add_option("--config", evl_config, "key = value config file (flags take precedence)");

    // predict
    auto* prd = app.add_subcommand("predict", "segment one image");
    NetworkFlags prd_net;
    prd_net.add_to(*prd, "kiunet");
    std::string prd_ckpt, prd_input, prd_prefix, prd_config;
    double prd_threshold = 0.5;
    prd->add_option("--checkpoint", prd_ckpt, "KIUC checkpoint");
    prd->add_option("--input", prd_input, "image as KIUT or binary PGM");
    prd->add_option("--out-prefix", prd_prefix, "writes <prefix>.prob.{kiut,pgm} and <prefix>.mask.{kiut,pgm}");
    prd->add_option("--threshold", prd_threshold);
    prd->add_option("--config", prd_config, "key = value config file (flags take precedence)");

    // rf
    auto* rfc = app.add_subcommand("rf", "receptive-field table of a variant's encoder");
    std::string rf_variant = "uc", rf_format = "text", rf_config;
    std::size_t rf_depth = 3, rf_probe = 0, rf_channels = 1;
    std::int64_t rf_kernel = 3;
    std::uint64_t rf_seed = 1;
    rfc->add_option("--variant", rf_variant, "one of: " + variant_names_list());
    rfc->add_option("--depth", rf_depth)->check(positive_integer);
    rfc->add_option("--kernel", rf_kernel)->check(positive_integer);
    rfc->add_option("--format", rf_format)->check(CLI::IsMember({"text", "csv"}));
    rfc->add_option("--probe-size", rf_probe, "also measure the gradient footprint on an NxN input (0: off)");
    rfc->add_option("--probe-channels", rf_channels)->check(positive_integer);
    rfc->add_option("--seed", rf_seed);
    rfc->add_option("--config", rf_config, "key = value config file (flags take precedence)");

    // params
    auto* prm = app.add_subcommand("params", "parameter count with per-layer breakdown");
    NetworkFlags prm_net;
    prm_net.add_to(*prm, "kiunet");
    std::string prm_format = "text", prm_config;
    prm->add_option("--format", prm_format)->check(CLI::IsMember({"text", "csv"}));
    prm->add_option("--config", prm_config, "key = value config file (flags take precedence)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (threads > 0) Eigen::setNbThreads(threads);
        CLI::App* sub = app.get_subcommands().front();
        const std::map<CLI::App*, std::string*> configs{{gen, &gen_config}, {trn, &trn_config}, {evl, &evl_config},
                                                       {prd, &prd_config}, {rfc, &rf_config}, {prm, &prm_config}};
        apply_config(*sub, *configs.at(sub));
        const std::map<CLI::App*, NetworkFlags*> net_flags{
            {trn, &trn_net}, {evl, &evl_net}, {prd, &prd_net}, {prm, &prm_net}};
        if (auto it = net_flags.find(sub); it != net_flags.end()) it->second->resolve();
        if (sub == gen && split_seed_opt->count() == 0) {
            split_seed = synth.seed;
            split_seed_opt->add_result(std::to_string(split_seed));
        }
        err << effective_config(app, *sub) << "\n";

        auto require = [](const std::string& v, const char* flag) {
            if (v.empty()) throw ConfigError(std::string("missing required option ") + flag);
        };

        if (sub == gen) {
            require(gen_out, "--out");
            synth.validate();
            auto [samples, manifest] = data::generate_synthetic(synth);
            const fs::path dir(gen_out);
            data::write_dataset(dir, samples, data::split(manifest, train_fraction, split_seed));
            for (std::size_t k = 2; k <= folds; ++k) {
                data::split(manifest, train_fraction, split_seed + k - 1)
                    .write(dir / ("manifest-fold" + std::to_string(k) + ".tsv"));
            }
            err << "wrote " << samples.size() << " samples to " << dir.string() << "\n";
            return 0;
        }

        if (sub == trn) {
            require(trn_data, "--data");
            require(trn_out, "--out");
            tcfg.record_time = !no_timing;
            tcfg.validate();
            const data::Dataset ds = data::load_dataset(trn_data, trn_manifest);
            if (ds.train.empty()) throw ConfigError("manifest has no train samples");
            fs::create_directories(trn_out);
            auto log_epoch = [&err](const EpochRecord& r) {
                err << "epoch " << r.epoch << " loss " << r.train_loss;
                if (r.val_dice) err << " val_dice " << *r.val_dice << " val_jaccard " << *r.val_jaccard;
                err << "\n";
            };
            auto run_training = [&]<typename T>() {
                Network<T> net = build_variant<T>(trn_net.parsed_variant(), trn_net.parsed_widths(), trn_net.depth,
                                                  tcfg.seed);
                auto result = train<T>(net, ds.train, ds.test, tcfg, log_epoch);
                io::save_checkpoint_file(fs::path(trn_out) / "final.kiuc", result.final_checkpoint);
                io::save_checkpoint_file(fs::path(trn_out) / "best.kiuc", result.best_checkpoint);
                std::ofstream csv(fs::path(trn_out) / "history.csv", std::ios::binary | std::ios::trunc);
                if (!csv) throw IoError("cannot write history.csv");
                csv << result.history.csv();
            };
            if (precision == "double") {
                run_training.template operator()<double>();
            } else {
                run_training.template operator()<float>();
            }
            err << "wrote final.kiuc, best.kiuc, history.csv to " << trn_out << "\n";
            return 0;
        }

        if (sub == evl) {
            require(evl_ckpt, "--checkpoint");
            require(evl_data, "--data");
            Network<float> net = load_checkpoint<float>(evl_ckpt, evl_net.parsed_variant(), evl_net.parsed_widths(),
                                                        evl_net.depth);
            std::vector<EvalReport> reports;
            for (const auto& manifest : evl_manifests) {
                const data::Dataset ds = data::load_dataset(evl_data, manifest);
                std::vector<data::Sample> chosen;
                if (evl_split != "test") chosen.insert(chosen.end(), ds.train.begin(), ds.train.end());
                if (evl_split != "train") chosen.insert(chosen.end(), ds.test.begin(), ds.test.end());
                if (evl_split == "all") chosen.insert(chosen.end(), ds.unassigned.begin(), ds.unassigned.end());
                if (chosen.empty()) throw ConfigError("no samples in split '" + evl_split + "' of " + manifest);
                reports.push_back(evaluate(net, chosen, evl_threshold));
            }
            EvalReport combined;
            if (reports.size() == 1) {
                combined = reports[0];
            } else {
                std::vector<SampleScore> rows;
                for (std::size_t f = 0; f < reports.size(); ++f) {
                    for (auto row : reports[f].rows) {
                        row.id = "fold" + std::to_string(f + 1) + ":" + row.id;
                        rows.push_back(row);
                    }
                }
                combined = EvalReport::from_rows(std::move(rows));
            }
            const FoldSummary summary = aggregate_folds(reports);
            const std::string table = metrics_table({{std::string(variant_name(net.variant())), summary}},
                                                    {net.count_params().total});
            if (evl_out == "-") {
                out << combined.csv();
                err << table;
            } else {
                std::ofstream csv(evl_out, std::ios::binary | std::ios::trunc);
                if (!csv) throw IoError("cannot write " + evl_out);
                csv << combined.csv();
                out << table;
            }
            return 0;
        }

        if (sub == prd) {
            require(prd_ckpt, "--checkpoint");
            require(prd_input, "--input");
            require(prd_prefix, "--out-prefix");
            Network<float> net = load_checkpoint<float>(prd_ckpt, prd_net.parsed_variant(), prd_net.parsed_widths(),
                                                        prd_net.depth);
            const fs::path input(prd_input);
            const Tensor<float> image =
                input.extension() == ".pgm" ? data::read_pgm(input) : io::load_tensor<float>(input);
            NoGradGuard no_grad;
            const Tensor<float> prob = net.forward(image);
            const BinaryMask mask = binarize(prob, prd_threshold);
            std::vector<float> mv(mask.bits.begin(), mask.bits.end());
            const Tensor<float> mask_t(prob.shape(), std::move(mv));
            io::save_tensor(prd_prefix + ".prob.kiut", prob);
            io::save_tensor(prd_prefix + ".mask.kiut", mask_t);
            data::write_pgm(prd_prefix + ".prob.pgm", prob);
            data::write_pgm(prd_prefix + ".mask.pgm", mask_t);
            err << "wrote " << prd_prefix << ".{prob,mask}.{kiut,pgm}\n";
            return 0;
        }

        if (sub == rfc) {
            const NetworkVariant v = parse_variant(rf_variant);
            std::vector<std::pair<std::string, Direction>> branches;
            if (uses_undercomplete(v)) branches.emplace_back("unet", Direction::undercomplete);
            if (uses_overcomplete(v)) branches.emplace_back("kinet", Direction::overcomplete);
            for (const auto& [label, dir] : branches) {
                const auto trace = rf::LayerTrace::encoder(dir, rf_depth, rf_kernel);
                rf::RFReport report = rf::analytic_rf(trace);
                if (rf_probe > 0) {
                    report.empirical = rf::empirical_rf(trace, rf_probe, {rf_channels, rf_seed});
                }
                if (branches.size() > 1) out << "# " << label << " encoder\n";
                out << (rf_format == "csv" ? report.csv() : report.table());
            }
            return 0;
        }

        if (sub == prm) {
            const Network<float> net =
                build_variant<float>(prm_net.parsed_variant(), prm_net.parsed_widths(), prm_net.depth, 0);
            const ParamReport report = net.count_params();
            const bool reference = net.variant() == NetworkVariant::kiunet;
            if (prm_format == "csv") {
                out << report.csv();
                if (reference) err << report.reference_note();
            } else {
                out << report.table(reference);
            }
            return 0;
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace kiunet::cli
