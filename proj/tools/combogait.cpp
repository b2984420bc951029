// Command-line surface: dataset generation, training, probe-gallery
// evaluation, the gradient-oracle suite, and single-sequence inference.
//
// Exit codes: 0 success, 1 validation/usage error, 2 file-format error,
// 3 failed gradient check.

#include <CLI11.hpp>

#include "combogait/config.hpp"
#include "combogait/eval.hpp"
#include "combogait/generator.hpp"
#include "combogait/gradcheck.hpp"

namespace {

using Scalar = float;

// Accepts either a manifest file or a directory holding manifest.csv.
std::string resolve_manifest(const std::string& path) {
    if (std::filesystem::is_directory(path)) {
        return (std::filesystem::path(path) / "manifest.csv").string();
    }
    return path;
}

uint64_t parse_seed_arg(const std::string& text) {
    return combogait::detail::parse_uint("--seed", text);
}

int cmd_generate(const std::string& out_dir, const std::string& seed_text, int64_t subjects,
                 int64_t seqs, int64_t frames, int64_t train_per_subject,
                 const std::string& ranges_text) {
    combogait::GenerateOptions opt;
    opt.out_dir = out_dir;
    opt.seed = parse_seed_arg(seed_text);
    opt.subjects = subjects;
    opt.sequences_per_subject = seqs;
    opt.frames = frames;
    opt.train_per_subject = train_per_subject;
    opt.ranges.clear();
    std::istringstream is(ranges_text);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (!item.empty()) opt.ranges.push_back(item);
    }
    const std::string manifest = combogait::generate_dataset(opt);
    std::cout << "wrote " << (opt.subjects * opt.sequences_per_subject)
              << " sequences for " << opt.subjects << " subjects\n"
              << "manifest: " << manifest << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_path, const std::string& trace_path) {
    combogait::FullConfig cfg;
    if (!config_path.empty()) cfg = combogait::load_config(config_path);
    combogait::apply_seed_env(cfg);

    auto ds = combogait::Dataset::load(resolve_manifest(data_path));
    if (ds.input_h != cfg.model.encoder.input_h || ds.input_w != cfg.model.encoder.input_w) {
        throw combogait::ConfigError(
            "train: dataset frames are " + std::to_string(ds.input_h) + "x" +
            std::to_string(ds.input_w) + " but the config expects " +
            std::to_string(cfg.model.encoder.input_h) + "x" +
            std::to_string(cfg.model.encoder.input_w));
    }
    cfg.model.n_train_identities = ds.n_identities();
    auto model = combogait::ComboGaitModelT<Scalar>::create(cfg.model, cfg.train.seed);

    cfg.train.checkpoint_path = out_path;
    cfg.train.trace_path = trace_path;
    const auto trace = combogait::train(model, ds, cfg.train, cfg.loss);

    if (!trace.empty()) {
        std::cout << "iterations: " << trace.size() << "\n"
                  << "first loss: " << trace.front().loss_total << "\n"
                  << "final loss: " << trace.back().loss_total << "\n";
    } else {
        combogait::save_checkpoint(out_path, model);
        std::cout << "iterations: 0 (model saved untrained)\n";
    }
    std::cout << "checkpoint: " << out_path << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest,
             const std::string& report_path, const std::string& split) {
    auto model = combogait::load_checkpoint<Scalar>(checkpoint);
    auto ds = combogait::Dataset::load(resolve_manifest(manifest));
    auto report = combogait::run_eval(model, ds, split);
    combogait::write_report(report_path, report);
    std::cout << combogait::report_to_csv(report);
    return 0;
}

int cmd_gradcheck() {
    auto suite = combogait::run_gradcheck_suite();
    // Aggregate repeated seeds per op for readable output.
    std::vector<std::pair<std::string, double>> by_name;
    for (const auto& r : suite.results) {
        auto it = std::find_if(by_name.begin(), by_name.end(),
                               [&](const auto& p) { return p.first == r.name; });
        if (it == by_name.end()) {
            by_name.emplace_back(r.name, r.max_rel_err);
        } else {
            it->second = std::max(it->second, r.max_rel_err);
        }
    }
    for (const auto& [name, err] : by_name) {
        std::printf("%-24s max_rel_err %.3e %s\n", name.c_str(), err,
                    err < 1e-4 ? "ok" : "FAIL");
    }
    std::printf("suite max_rel_err %.3e\n", suite.max_rel_err());
    if (!suite.pass()) {
        std::cerr << "gradcheck failed: max relative error " << suite.max_rel_err()
                  << " >= 1e-4\n";
        return 3;
    }
    return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& sil_path,
              const std::string& smpl_path) {
    auto model = combogait::load_checkpoint<Scalar>(checkpoint);
    auto sil = combogait::read_silhouette(sil_path);
    auto smpl = combogait::read_smpl(smpl_path);
    auto [embedding, pred] = combogait::extract_embedding(model, sil, smpl);
    std::cout << "embedding_dim " << embedding.size() << "\n";
    std::cout << "embedding";
    char buf[48];
    for (double v : embedding) {
        std::snprintf(buf, sizeof(buf), " %.9g", v);
        std::cout << buf;
    }
    std::cout << "\nage_class " << pred.age_class << "\nsex_class " << pred.sex_class
              << "\nbmi_class " << pred.bmi_class << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"combogait: multi-modal gait recognition and attribute estimation"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
    std::string gen_out, gen_seed = "1", gen_ranges = "close";
    int64_t gen_subjects = 4, gen_seqs = 4, gen_frames = 48, gen_train = -1;
    gen->add_option("--out-dir", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--subjects", gen_subjects, "number of subjects");
    gen->add_option("--sequences-per-subject", gen_seqs, "sequences per subject");
    gen->add_option("--frames", gen_frames, "frames per sequence");
    gen->add_option("--train-per-subject", gen_train,
                    "sequences per subject assigned to the train split (-1: all)");
    gen->add_option("--ranges", gen_ranges, "comma-separated capture-range tags");

    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_config, tr_data, tr_out, tr_trace;
    tr->add_option("--config", tr_config, "config file (defaults when omitted)");
    tr->add_option("--data", tr_data, "manifest file or dataset directory")->required();
    tr->add_option("--out", tr_out, "output checkpoint path")->required();
    tr->add_option("--trace", tr_trace, "loss-trace CSV path");

    auto* ev = app.add_subcommand("eval", "probe-gallery evaluation");
    std::string ev_ckpt, ev_manifest, ev_report, ev_split = "test";
    ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--manifest", ev_manifest, "manifest file or dataset directory")
        ->required();
    ev->add_option("--report", ev_report, "output report CSV")->required();
    ev->add_option("--split", ev_split, "probe split: train or test");

    auto* gc = app.add_subcommand("gradcheck", "run the gradient-oracle suite");

    auto* in = app.add_subcommand("infer", "embed one sequence pair");
    std::string in_ckpt, in_sil, in_smpl;
    in->add_option("--checkpoint", in_ckpt, "model checkpoint")->required();
    in->add_option("--silhouette", in_sil, "silhouette sequence file")->required();
    in->add_option("--smpl", in_smpl, "pose/shape sequence file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed()) {
            // The seed env var also covers generation when no flag was given.
            if (gen->count("--seed") == 0) {
                const char* env = std::getenv("COMBOGAIT_SEED");
                if (env != nullptr && *env != '\0') gen_seed = env;
            }
            return cmd_generate(gen_out, gen_seed, gen_subjects, gen_seqs, gen_frames,
                                gen_train, gen_ranges);
        }
        if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_trace);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_manifest, ev_report, ev_split);
        if (gc->parsed()) return cmd_gradcheck();
        if (in->parsed()) return cmd_infer(in_ckpt, in_sil, in_smpl);
    } catch (const combogait::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const combogait::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
