// essc: semantic voxel-grid refinement toolkit.
//
// Subcommands cover the full pipeline: gradient verification, training,
// refinement of coarse grids, evaluation, and multi-scale target generation.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "essc/common.hpp"
#include "essc/gradcheck.hpp"
#include "essc/metrics.hpp"
#include "essc/trainkit.hpp"
#include "essc/unet3d.hpp"
#include "essc/voxio.hpp"

namespace fs = std::filesystem;
using namespace essc;

namespace {

int thread_budget() {
    unsigned n = std::thread::hardware_concurrency();
    if (n == 0) n = 1;
    if (const char* env = std::getenv("ESSC_THREADS")) {
        try {
            const long cap = std::stol(env);
            if (cap >= 1) n = std::min<unsigned>(n, unsigned(cap));
        } catch (const std::exception&) {
            throw std::invalid_argument("ESSC_THREADS must be a positive integer");
        }
    }
    return int(n);
}

std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

int cmd_gradcheck(const std::string& filter, int trials, uint64_t seed, bool corrupt) {
    GradCheckOptions opts;
    if (trials > 0) opts.trials = trials;
    opts.seed = seed;
    opts.corrupt_backward = corrupt;
    auto reports = run_grad_checks(filter, opts);
    bool all_pass = true;
    std::printf("%-32s %7s %14s  %s\n", "op", "trials", "max_rel_err", "status");
    for (const auto& r : reports) {
        std::printf("%-32s %7d %14.3e  %s\n", r.op.c_str(), r.trials, r.max_rel_err,
                    r.pass ? "ok" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

int cmd_train(const std::string& config_path, const std::string& out_override,
              int64_t seed_override) {
    std::ifstream f(config_path);
    if (!f.good()) throw std::invalid_argument("cannot open config '" + config_path + "'");
    std::stringstream buf;
    buf << f.rdbuf();
    RunConfig run = run_config_from_json(buf.str());
    if (!out_override.empty()) run.checkpoint_out = out_override;
    if (seed_override >= 0) run.model.seed = uint64_t(seed_override);

    std::ofstream log;
    const std::string log_path =
        run.log_out.empty() ? run.checkpoint_out + ".log.jsonl" : run.log_out;
    log.open(log_path, std::ios::trunc);
    if (!log.good()) throw std::invalid_argument("cannot open log file '" + log_path + "'");

    TrainResult r = train_refiner(run, &log);
    const auto bytes = read_file(run.checkpoint_out);
    std::printf("steps:      %lld\n", static_cast<long long>(r.steps));
    std::printf("final IoU:  %.4f\n", r.final_iou);
    std::printf("final mIoU: %.4f\n", r.final_miou);
    std::printf("checkpoint: %s (digest %s)\n", run.checkpoint_out.c_str(),
                hex64(fnv1a64(bytes.data(), bytes.size())).c_str());
    std::printf("log:        %s\n", log_path.c_str());
    return 0;
}

int cmd_refine(const std::string& checkpoint_path, const std::string& in_path,
               const std::string& text_path, const std::string& out_path) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    SemGrid coarse = load_grid(in_path);
    TextEmbedding text;
    const TextEmbedding* text_ptr = nullptr;
    if (!text_path.empty()) {
        text = load_text_embedding(text_path);
        text_ptr = &text;
    }
    MultiScaleLogits logits = refine_forward(coarse, ck.cfg, ck.params, text_ptr);
    SemGrid refined = argmax_labels(logits, coarse);
    save_grid(out_path, refined);
    const auto bytes = read_file(out_path);
    std::printf("refined %s -> %s (digest %s)\n", in_path.c_str(), out_path.c_str(),
                hex64(fnv1a64(bytes.data(), bytes.size())).c_str());
    return 0;
}

std::vector<std::string> grid_names(const std::string& dir) {
    std::vector<std::string> names;
    if (!fs::is_directory(dir)) throw std::invalid_argument("'" + dir + "' is not a directory");
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".essc")
            names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& csv_out) {
    const auto pred_names = grid_names(pred_dir);
    const auto gt_names = grid_names(gt_dir);
    if (pred_names.empty()) throw std::invalid_argument("no .essc grids in '" + pred_dir + "'");
    if (pred_names != gt_names) {
        std::string msg = "prediction and ground-truth file sets differ;";
        for (const auto& n : gt_names)
            if (!std::binary_search(pred_names.begin(), pred_names.end(), n))
                msg += " missing prediction " + n;
        for (const auto& n : pred_names)
            if (!std::binary_search(gt_names.begin(), gt_names.end(), n))
                msg += " missing ground truth " + n;
        throw std::invalid_argument(msg);
    }

    // per-scene matrices computed in parallel, merged in filename order
    uint32_t classes = 0;
    {
        SemGrid first = load_grid(fs::path(gt_dir) / gt_names[0]);
        classes = first.num_semantic_classes;
    }
    std::vector<SceneScore> scores(pred_names.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string error_msg;
    std::mutex error_mu;
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= pred_names.size() || failed.load()) break;
            try {
                SemGrid pred = load_grid(fs::path(pred_dir) / pred_names[i]);
                SemGrid gt = load_grid(fs::path(gt_dir) / pred_names[i]);
                ConfusionMatrix cm(std::max(
                    classes, std::max(pred.num_semantic_classes, gt.num_semantic_classes)));
                cm.accumulate(pred, gt);
                scores[i] = {pred_names[i], std::move(cm)};
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mu);
                failed.store(true);
                error_msg = e.what();
            }
        }
    };
    const int threads = std::min<int>(thread_budget(), int(pred_names.size()));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failed.load()) throw std::invalid_argument(error_msg);

    ReportTable table = report_table(scores);
    std::fputs(table.text.c_str(), stdout);
    if (!csv_out.empty()) {
        std::ofstream f(csv_out, std::ios::trunc);
        if (!f.good()) throw std::invalid_argument("cannot open '" + csv_out + "'");
        f << table.csv;
        std::printf("csv: %s\n", csv_out.c_str());
    }
    return 0;
}

int cmd_make_msgt(const std::string& gt_dir, const std::string& out_dir,
                  const std::vector<int>& scales) {
    const auto names = grid_names(gt_dir);
    if (names.empty()) throw std::invalid_argument("no .essc grids in '" + gt_dir + "'");
    if (scales.empty()) throw std::invalid_argument("no scales requested");
    fs::create_directories(out_dir);
    for (const auto& name : names) {
        SemGrid gt = load_grid(fs::path(gt_dir) / name);
        const std::string stem = fs::path(name).stem().string();
        for (int s : scales) {
            if (s != 1 && s != 2 && s != 4 && s != 8)
                throw std::invalid_argument("scales must lie in {1, 2, 4, 8}");
            SemGrid target = s == 1 ? gt : downsample_labels_majority(gt, uint32_t(s));
            const std::string out =
                (fs::path(out_dir) / (stem + ".s" + std::to_string(s) + ".essc")).string();
            save_grid(out, target);
        }
        std::printf("%s: wrote %zu scale targets\n", name.c_str(), scales.size());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semantic voxel-grid refinement toolkit"};
    app.require_subcommand(1);

    auto* gc = app.add_subcommand("gradcheck", "finite-difference verification of every op");
    std::string gc_filter;
    int gc_trials = 0;
    int64_t gc_seed = 20240;
    bool gc_corrupt = false;
    gc->add_option("--filter", gc_filter, "check a single op by name");
    gc->add_option("--trials", gc_trials, "trials per op (default 10)");
    gc->add_option("--seed", gc_seed, "rng seed");
    gc->add_flag("--corrupt-backward", gc_corrupt, "test fixture: corrupt one analytic gradient")
        ->group("");  // hidden

    auto* pdc = app.add_subcommand("print-default-config", "emit a complete training config");

    auto* tr = app.add_subcommand("train", "train the refiner from a config file");
    std::string tr_config, tr_out;
    int64_t tr_seed = -1;
    tr->add_option("--config", tr_config, "run config JSON")->required();
    tr->add_option("--out", tr_out, "checkpoint output path (overrides the config)");
    tr->add_option("--seed", tr_seed, "seed override");

    auto* rf = app.add_subcommand("refine", "refine a coarse grid with a trained checkpoint");
    std::string rf_ckpt, rf_in, rf_text, rf_out;
    rf->add_option("--checkpoint", rf_ckpt, "trained checkpoint")->required();
    rf->add_option("--in", rf_in, "coarse input grid")->required();
    rf->add_option("--text", rf_text, "text embedding file (required when fusion is enabled)");
    rf->add_option("--out", rf_out, "refined output grid")->required();

    auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
    std::string ev_pred, ev_gt, ev_out;
    ev->add_option("--pred", ev_pred, "directory of predicted grids")->required();
    ev->add_option("--gt", ev_gt, "directory of ground-truth grids")->required();
    ev->add_option("--out", ev_out, "CSV output path");

    auto* mk = app.add_subcommand("make-msgt", "write multi-scale ground-truth targets");
    std::string mk_gt, mk_out;
    std::vector<int> mk_scales = {1, 2, 4, 8};
    mk->add_option("--gt", mk_gt, "directory of ground-truth grids")->required();
    mk->add_option("--out", mk_out, "output directory")->required();
    mk->add_option("--scales", mk_scales, "scales to generate")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gc->parsed())
            return cmd_gradcheck(gc_filter, gc_trials, uint64_t(gc_seed), gc_corrupt);
        if (pdc->parsed()) {
            RunConfig defaults;
            defaults.train.push_back({"scene0_coarse.essc", "scene0_gt.essc", ""});
            std::printf("%s\n", run_config_to_json(defaults).c_str());
            return 0;
        }
        if (tr->parsed()) return cmd_train(tr_config, tr_out, tr_seed);
        if (rf->parsed()) return cmd_refine(rf_ckpt, rf_in, rf_text, rf_out);
        if (ev->parsed()) return cmd_eval(ev_pred, ev_gt, ev_out);
        if (mk->parsed()) return cmd_make_msgt(mk_gt, mk_out, mk_scales);
    } catch (const internal_error& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
