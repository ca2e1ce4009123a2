// Command-line front end for the cross-modal detection pipeline.
//
// Subcommands:
//   gen-data        write a procedural train/val scene directory
//   train           train a model, writing a CSV log and checkpoints
//   eval            evaluate a checkpoint on the val split
//   robustness      sensor-failure sweep (both / lidar-only / camera-only /
//                   each single-camera miss)
//   ablate          train with and without query denoising over several
//                   seeds and report median validation mAP
//   dump-attention  export cross-attention maps for chosen queries
//
// Every run writes a manifest (resolved config, argv, output file hashes)
// into its output directory so results are reproducible from the manifest
// alone. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cmt/checkpoint.hpp"
#include "cmt/eval.hpp"
#include "cmt/train.hpp"

namespace fs = std::filesystem;
using cmt::Config;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

const char* kUsage = R"(usage: cmt_cli <command> [--config FILE] [--<key> VALUE ...] [flags]

commands:
  gen-data        --out DIR --scenes N [--val M] [--force]
  train           --data DIR --out DIR [--force] [--mask-modal E1 E2]
                  [--denoise on|off]
  eval            --data DIR --ckpt DIR --out DIR [--force]
                  [--mask both|camera-only|lidar-only] [--camera-drop I]
                  [--split val|train]
  robustness      --data DIR --ckpt DIR --out DIR [--force]
  ablate          --data DIR --out DIR [--force] [--seeds A,B,C]
  dump-attention  --data DIR --ckpt DIR --out DIR [--force]
                  [--scene I] [--layer L] [--queries A,B,C]

Any config key (see README or cmt/config.hpp) may be overridden with
--<key> VALUE, e.g. --epochs 4 --lr 2e-4. --config FILE loads overrides
from a `key = value` file before CLI overrides are applied.
)";

struct Args {
    std::string command;
    Config cfg;
    std::map<std::string, std::string> flags;  // non-config flags with values
    bool force = false;
    std::vector<std::string> argv_copy;
};

bool is_config_key(const std::string& key) {
    return Config::fields().count(key) > 0;
}

Args parse_args(int argc, char** argv) {
    Args args;
    for (int i = 0; i < argc; ++i) args.argv_copy.push_back(argv[i]);
    if (argc < 2) throw UsageError("missing command");
    args.command = argv[1];
    static const std::vector<std::string> commands = {
        "gen-data", "train", "eval", "robustness", "ablate", "dump-attention"};
    if (std::find(commands.begin(), commands.end(), args.command) == commands.end())
        throw UsageError("unknown command: " + args.command);
    static const std::vector<std::string> value_flags = {
        "out",  "data",  "ckpt",  "scenes", "val",     "mask",
        "split", "camera-drop", "scene", "layer", "queries", "seeds"};

    // --config is applied first so later overrides win, matching the order
    // they appear on the command line for config keys themselves.
    std::vector<std::pair<std::string, std::string>> overrides;
    for (int i = 2; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg.rfind("--", 0) != 0) throw UsageError("expected flag, got: " + arg);
        std::string key = arg.substr(2);
        if (key == "force") {
            args.force = true;
            continue;
        }
        auto next = [&](const char* what) {
            if (i + 1 >= argc) throw UsageError(std::string("missing value for --") + what);
            return std::string(argv[++i]);
        };
        if (key == "config") {
            args.cfg.load_file(next("config"));
        } else if (key == "mask-modal") {
            overrides.emplace_back("eta1", next("mask-modal"));
            overrides.emplace_back("eta2", next("mask-modal"));
        } else if (key == "denoise") {
            std::string v = next("denoise");
            if (v != "on" && v != "off") throw UsageError("--denoise takes on|off");
            overrides.emplace_back("dn_enable", v == "on" ? "1" : "0");
        } else if (is_config_key(key)) {
            overrides.emplace_back(key, next(key.c_str()));
        } else if (std::find(value_flags.begin(), value_flags.end(), key) !=
                   value_flags.end()) {
            args.flags[key] = next(key.c_str());
        } else {
            throw UsageError("unknown flag: " + arg);
        }
    }
    for (const auto& [k, v] : overrides) args.cfg.set(k, v);
    args.cfg.validate();
    return args;
}

std::string require_flag(const Args& args, const std::string& key) {
    auto it = args.flags.find(key);
    if (it == args.flags.end())
        throw UsageError(args.command + " requires --" + key);
    return it->second;
}

std::string flag_or(const Args& args, const std::string& key, const std::string& dflt) {
    auto it = args.flags.find(key);
    return it == args.flags.end() ? dflt : it->second;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
    std::vector<int> out;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw UsageError("bad integer in --" + what + ": " + tok);
        }
    }
    if (out.empty()) throw UsageError("--" + what + " needs at least one value");
    return out;
}

/// Refuse to clobber prior results unless --force is given.
fs::path prepare_out_dir(const Args& args) {
    fs::path out = require_flag(args, "out");
    if (fs::exists(out) && !fs::is_empty(out) && !args.force)
        throw UsageError("output dir " + out.string() +
                         " is not empty (use --force to overwrite)");
    fs::create_directories(out);
    return out;
}

std::uint64_t fnv1a_file(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash " + file.string());
    std::uint64_t h = 1469598103934665603ull;
    char buf[1 << 14];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    return h;
}

/// Resolved config + argv + an FNV-1a hash per output file.
void write_manifest(const fs::path& out, const Args& args) {
    std::vector<std::pair<std::string, std::uint64_t>> hashes;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
        if (!e.is_regular_file() || e.path().filename() == "manifest_run.txt") continue;
        hashes.emplace_back(fs::relative(e.path(), out).string(), fnv1a_file(e.path()));
    }
    std::sort(hashes.begin(), hashes.end());
    std::ofstream m(out / "manifest_run.txt", std::ios::binary);
    m << "command:";
    for (const auto& a : args.argv_copy) m << " " << a;
    m << "\n\n[config]\n" << args.cfg.dump() << "\n[artifacts]\n";
    m << std::hex;
    for (const auto& [name, h] : hashes) m << h << "  " << name << "\n";
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Args& args) {
    fs::path out = prepare_out_dir(args);
    int n_train = std::stoi(require_flag(args, "scenes"));
    int n_val = std::stoi(flag_or(args, "val", "0"));
    if (n_train < 0 || n_val < 0) throw UsageError("--scenes/--val must be >= 0");
    cmt::write_dataset(out, n_train, n_val, args.cfg);
    write_manifest(out, args);
    std::cout << "wrote " << n_train << " train + " << n_val << " val scenes to " << out
              << "\n";
    return 0;
}

int cmd_train(const Args& args) {
    fs::path out = prepare_out_dir(args);
    auto index = cmt::read_dataset_index(require_flag(args, "data"));
    std::vector<cmt::Scene> scenes = cmt::load_scenes(index.train);

    cmt::CmtModel<float> model(args.cfg);
    cmt::AdamW<float> opt(model.params(), args.cfg);
    if (args.cfg.epochs <= 0) {
        cmt::save_checkpoint(out / "ckpt_final", model, &opt);
        write_manifest(out, args);
        std::cout << "epochs = 0: wrote initial checkpoint only\n";
        return 0;
    }

    std::ofstream log(out / "train_log.csv", std::ios::binary);
    const int steps_per_epoch = static_cast<int>(
        (scenes.size() + args.cfg.batch_size - 1) / args.cfg.batch_size);
    const int interval_steps = args.cfg.ckpt_interval * steps_per_epoch;
    std::function<void(const cmt::StepStats<float>&)> on_step =
        [&](const cmt::StepStats<float>& s) {
        if (interval_steps > 0 && (s.step + 1) % interval_steps == 0 &&
            s.step + 1 < args.cfg.epochs * steps_per_epoch) {
            int epoch = (s.step + 1) / steps_per_epoch;
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_epoch%03d", epoch);
            cmt::save_checkpoint(out / name, model, &opt);
        }
        if ((s.step + 1) % steps_per_epoch == 0)
            std::cout << "epoch " << (s.step + 1) / steps_per_epoch << "/" << args.cfg.epochs
                      << "  loss " << s.total << std::endl;
    };
    cmt::train_model(model, opt, scenes, &log, on_step);
    log.close();
    cmt::save_checkpoint(out / "ckpt_final", model, &opt);
    write_manifest(out, args);
    std::cout << "training done; checkpoint in " << (out / "ckpt_final") << "\n";
    return 0;
}

struct EvalSetup {
    cmt::CmtModel<float> model;
    std::vector<cmt::Scene> scenes;
};

EvalSetup load_eval_setup(const Args& args) {
    auto index = cmt::read_dataset_index(require_flag(args, "data"));
    const auto& split =
        flag_or(args, "split", "val") == "train" ? index.train : index.val;
    if (split.empty()) throw std::runtime_error("selected split has no scenes");
    EvalSetup setup{cmt::CmtModel<float>(args.cfg), cmt::load_scenes(split)};
    cmt::load_checkpoint(require_flag(args, "ckpt"), setup.model);
    return setup;
}

int cmd_eval(const Args& args) {
    fs::path out = prepare_out_dir(args);
    EvalSetup setup = load_eval_setup(args);

    std::string mask_name = flag_or(args, "mask", "both");
    cmt::ModalityMask mask{true, true};
    if (mask_name == "camera-only") {
        mask = {true, false};
    } else if (mask_name == "lidar-only") {
        mask = {false, true};
    } else if (mask_name != "both") {
        throw UsageError("--mask takes both|camera-only|lidar-only");
    }
    std::vector<int> drop;
    if (args.flags.count("camera-drop"))
        drop = parse_int_list(args.flags.at("camera-drop"), "camera-drop");

    cmt::EvalReport report = cmt::evaluate(setup.model, setup.scenes, mask, drop);
    std::ofstream(out / "report.csv", std::ios::binary) << report.to_csv();
    std::cout << report.to_text();
    write_manifest(out, args);
    return 0;
}

int cmd_robustness(const Args& args) {
    fs::path out = prepare_out_dir(args);
    EvalSetup setup = load_eval_setup(args);

    std::vector<cmt::FailureSpec> rows;
    rows.push_back(cmt::simulate_sensor_failure(cmt::FailureMode::kNone));
    rows.push_back(cmt::simulate_sensor_failure(cmt::FailureMode::kLidar));
    rows.push_back(cmt::simulate_sensor_failure(cmt::FailureMode::kAllCameras));
    for (int c = 0; c < args.cfg.n_cameras; ++c)
        rows.push_back(cmt::simulate_sensor_failure(cmt::FailureMode::kSingleCamera, c));

    std::ostringstream csv;
    csv.precision(9);
    csv << "condition,map,mate\n";
    std::cout << "condition        mAP      mATE\n";
    for (const auto& spec : rows) {
        cmt::EvalReport r = cmt::evaluate(setup.model, setup.scenes, spec.mask,
                                          spec.camera_drop);
        csv << spec.label << ',' << r.map << ',' << r.mate << "\n";
        std::printf("%-14s %7.4f %9.4f\n", spec.label.c_str(), r.map, r.mate);
    }
    std::ofstream(out / "robustness.csv", std::ios::binary) << csv.str();
    write_manifest(out, args);
    return 0;
}

int cmd_ablate(const Args& args) {
    fs::path out = prepare_out_dir(args);
    auto index = cmt::read_dataset_index(require_flag(args, "data"));
    if (index.val.empty()) throw std::runtime_error("ablate needs a val split");
    std::vector<cmt::Scene> train_scenes = cmt::load_scenes(index.train);
    std::vector<cmt::Scene> val_scenes = cmt::load_scenes(index.val);

    std::vector<int> seeds = parse_int_list(flag_or(args, "seeds", "1,2,3"), "seeds");
    std::ostringstream csv;
    csv.precision(9);
    csv << "seed,denoise,map,mate\n";
    std::map<int, std::vector<double>> maps;  // dn_enable -> per-seed mAP
    for (int seed : seeds) {
        for (int dn : {1, 0}) {
            Config cfg = args.cfg;
            cfg.seed = seed;
            cfg.dn_enable = dn;
            cmt::CmtModel<float> model(cfg);
            cmt::AdamW<float> opt(model.params(), cfg);
            cmt::train_model(model, opt, train_scenes);
            cmt::EvalReport r =
                cmt::evaluate(model, val_scenes, cmt::ModalityMask{true, true});
            csv << seed << ',' << dn << ',' << r.map << ',' << r.mate << "\n";
            maps[dn].push_back(r.map);
            std::cout << "seed " << seed << " denoise " << (dn ? "on " : "off")
                      << "  mAP " << r.map << "\n";
        }
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    double med_on = median(maps[1]), med_off = median(maps[0]);
    csv << "median,1," << med_on << ",\nmedian,0," << med_off << ",\n";
    std::ofstream(out / "ablation.csv", std::ios::binary) << csv.str();
    std::cout << "median mAP: denoise on " << med_on << ", off " << med_off << "\n";
    write_manifest(out, args);
    return 0;
}

int cmd_dump_attention(const Args& args) {
    fs::path out = prepare_out_dir(args);
    EvalSetup setup = load_eval_setup(args);
    int scene_idx = std::stoi(flag_or(args, "scene", "0"));
    if (scene_idx < 0 || scene_idx >= static_cast<int>(setup.scenes.size()))
        throw UsageError("--scene out of range for the selected split");
    int layer = std::stoi(flag_or(args, "layer", std::to_string(args.cfg.n_layers - 1)));
    std::vector<int> queries = parse_int_list(flag_or(args, "queries", "0,1,2,3"), "queries");
    int files = cmt::dump_attention(setup.model, setup.scenes[scene_idx], layer, queries, out);
    write_manifest(out, args);
    std::cout << "wrote " << files << " pixmaps + attention.csv to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        Args args = parse_args(argc, argv);
        if (args.command == "gen-data") return cmd_gen_data(args);
        if (args.command == "train") return cmd_train(args);
        if (args.command == "eval") return cmd_eval(args);
        if (args.command == "robustness") return cmd_robustness(args);
        if (args.command == "ablate") return cmd_ablate(args);
        return cmd_dump_attention(args);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << kUsage;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
