#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "voxattn/parallel.hpp"
#include "voxattn/selfcheck.hpp"
#include "voxattn/train.hpp"
#include "voxattn/vsa.hpp"

namespace {

using namespace vx;

std::vector<i64> parse_i64_list(const std::string& text) {
    std::vector<i64> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t pos = 0;
            out.push_back(std::stoll(item, &pos));
            if (pos != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("bench: bad size list entry '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("bench: size list is empty");
    for (i64 n : out)
        if (n < 1) throw ConfigError("bench: sizes must be positive");
    return out;
}

std::string scene_index_name(const char* stem, i64 i) {
    std::ostringstream os;
    os << stem << "_" << std::setw(3) << std::setfill('0') << i << ".txt";
    return os.str();
}

SegmentTable bench_segments(Rng& rng, i64 n) {
    const i64 side = std::max<i64>(1, static_cast<i64>(std::llround(std::sqrt(static_cast<double>(n) / 6.0))));
    std::vector<VoxelCoord> vox;
    vox.reserve(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i)
        vox.push_back({rng.uniform_int(0, side - 1), rng.uniform_int(0, side - 1), rng.uniform_int(0, 1)});
    return build_segments(vox);
}

template <class T>
int run_bench(const std::vector<i64>& sizes, i64 k, i64 d, int repeats, std::uint64_t seed) {
    if (k < 1 || d < 1) throw ConfigError("bench: k and d must be positive");
    if (repeats < 1) throw ConfigError("bench: repeats must be positive");
    if (repeats == 1) std::cerr << "warning: a single repeat makes the median noisy\n";
    std::cout << "n median_ms ratio_to_prev\n";
    double prev = 0.0;
    for (i64 n : sizes) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(n)));
        auto seg = bench_segments(rng, n);
        auto x = uniform_array<T>(rng, {n, d}, T(-1), T(1));
        auto p = make_vsa_params<T>(rng, d, k, d, d, 8);
        std::vector<double> times;
        times.reserve(static_cast<std::size_t>(repeats));
        for (int rep = 0; rep < repeats; ++rep) {
            const auto t0 = std::chrono::steady_clock::now();
            auto h = vsa_encode<T>(nullptr, x, p, seg);
            auto hh = conv_ffn<T>(nullptr, h, p);
            auto dec = vsa_decode<T>(nullptr, x, hh, p, seg);
            const auto t1 = std::chrono::steady_clock::now();
            if (!std::isfinite(static_cast<double>(dec[0]))) throw CheckError("bench: non-finite output");
            times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        const std::size_t mid = times.size() / 2;
        const double median = times.size() % 2 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
        const double ratio = prev > 0.0 ? median / prev : 0.0;
        std::cout << n << " " << std::fixed << std::setprecision(3) << median << " " << std::setprecision(2)
                  << ratio << "\n";
        prev = median;
    }
    return 0;
}

int run(int argc, char** argv) {
    CLI::App app{"voxel set attention toolkit"};
    app.require_subcommand(1);

    std::uint64_t seed = 1;
    int threads = 1;
    std::string precision = "f64";
    std::string config_path;
    app.add_option("--seed", seed, "base seed for every random stream");
    app.add_option("--threads", threads, "worker threads; results are identical for any value");
    app.add_option("--precision", precision, "f32 or f64 (bench only accepts f32)")
        ->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--config", config_path, "key = value config file");

    auto* sc_self = app.add_subcommand("selftest", "run the built-in verification suites");
    std::string filter;
    bool sabotage = false, quick = false;
    sc_self->add_option("--filter", filter, "only run suites whose name contains this substring");
    sc_self->add_flag("--sabotage-vjp", sabotage, "inject a wrong backward rule; the run must then fail");
    sc_self->add_flag("--quick", quick, "trimmed case counts");

    auto* sc_bench = app.add_subcommand("bench", "time the attention forward path");
    std::string n_list = "50000,100000,200000";
    i64 bench_k = 8, bench_d = 16;
    int repeats = 5;
    sc_bench->add_option("--n-list", n_list, "comma-separated point counts");
    sc_bench->add_option("--k", bench_k, "latent slots");
    sc_bench->add_option("--d", bench_d, "feature width");
    sc_bench->add_option("--repeats", repeats, "timed runs per size; the median is reported");

    auto* sc_gen = app.add_subcommand("gen", "write labeled synthetic scenes");
    i64 gen_count = 10;
    std::string outdir;
    sc_gen->add_option("--count", gen_count, "number of scenes");
    sc_gen->add_option("--outdir", outdir, "output directory")->required();

    auto* sc_train = app.add_subcommand("train-toy", "train the toy detector on synthetic scenes");
    std::string metrics_path, ckpt_out;
    sc_train->add_option("--metrics", metrics_path, "write line-delimited training metrics here");
    sc_train->add_option("--checkpoint", ckpt_out, "write the trained model here");

    auto* sc_infer = app.add_subcommand("infer", "run detection on a point cloud file");
    std::string ckpt_in, input_path, out_path;
    sc_infer->add_option("--checkpoint", ckpt_in, "trained model file")->required();
    sc_infer->add_option("--input", input_path, "point cloud (.bin or .txt)")->required();
    sc_infer->add_option("--out", out_path, "detections output file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }

    if (threads < 1) throw ConfigError("--threads must be at least 1");
    set_num_threads(threads);
    const bool f32 = precision == "f32";
    if (f32 && !sc_bench->parsed()) throw ConfigError("--precision f32 is only supported by bench");

    KvConfig cfg;
    const bool have_cfg = !config_path.empty();
    if (have_cfg) {
        if (!(sc_gen->parsed() || sc_train->parsed()))
            throw ConfigError("--config is only read by gen and train-toy");
        cfg = KvConfig::from_file(config_path);
    }

    if (sc_self->parsed()) {
        check::Options opt;
        opt.filter = filter;
        opt.sabotage_vjp = sabotage;
        opt.seed = seed;
        opt.quick = quick;
        auto results = check::run_suites(opt);
        bool all_ok = true;
        for (const auto& r : results) {
            std::cout << "suite " << r.name << ": " << (r.ok() ? "pass" : "FAIL") << " (" << r.passed
                      << " passed, " << r.failed << " failed)\n";
            if (!r.first_failure.empty()) std::cout << "  first failure: " << r.first_failure << "\n";
            all_ok = all_ok && r.ok();
        }
        return all_ok ? 0 : 1;
    }

    if (sc_bench->parsed()) {
        auto sizes = parse_i64_list(n_list);
        return f32 ? run_bench<float>(sizes, bench_k, bench_d, repeats, seed)
                   : run_bench<double>(sizes, bench_k, bench_d, repeats, seed);
    }

    if (sc_gen->parsed()) {
        if (gen_count < 1) throw ConfigError("gen: --count must be positive");
        SceneSpec spec;
        if (have_cfg) {
            spec = SceneSpec::from_config(cfg);
            cfg.require_consumed();
        }
        spec.validate();
        std::error_code ec;
        std::filesystem::create_directories(outdir, ec);
        if (ec) throw IoError("gen: cannot create '" + outdir + "': " + ec.message());
        for (i64 i = 0; i < gen_count; ++i) {
            auto scene = gen_scene_robust(derive_seed(seed, static_cast<std::uint64_t>(i)), spec);
            write_points_text(outdir + "/" + scene_index_name("points", i), scene.pc);
            write_boxes_text(outdir + "/" + scene_index_name("boxes", i), scene.boxes);
        }
        std::cout << "wrote " << gen_count << " scenes to " << outdir << "\n";
        return 0;
    }

    if (sc_train->parsed()) {
        TrainToyConfig tc;
        if (have_cfg) {
            tc = TrainToyConfig::from_config(cfg);
            cfg.require_consumed();
        }
        tc.validate();
        auto model = make_toy_model(seed, tc.scene);
        auto res = train_toy(model, tc, seed, metrics_path);
        std::cout << std::fixed << std::setprecision(4);
        std::cout << "loss: step0 " << res.step0_loss << " final " << res.final_loss << "\n";
        std::cout << "final eval: recall " << res.final_eval.recall << " ap " << res.final_eval.ap << " ("
                  << res.final_eval.n_gt << " boxes, " << res.final_eval.n_pred << " detections)\n";
        if (!metrics_path.empty()) std::cout << "metrics written to " << metrics_path << "\n";
        if (!ckpt_out.empty()) {
            auto ck = model_checkpoint(model);
            write_checkpoint(ckpt_out, ck);
            std::cout << "checkpoint written to " << ckpt_out << "\n";
        }
        return 0;
    }

    if (sc_infer->parsed()) {
        auto ck = read_checkpoint(ckpt_in);
        auto model = model_from_checkpoint(ck);
        const bool is_bin = input_path.size() >= 4 && input_path.substr(input_path.size() - 4) == ".bin";
        auto pc = is_bin ? read_kitti_bin(input_path) : read_points_text(input_path);
        pc = crop_range(pc, model.cfg.grid);
        Detections det;
        if (pc.n() > 0) det = predict_scene(model, pc);
        write_detections_text(out_path, det.boxes, det.scores);
        std::cout << det.boxes.size() << " detections written to " << out_path << "\n";
        return 0;
    }

    throw ConfigError("no subcommand given");
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const vx::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return vx::exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
