// fscnn: synthetic-scene generation, sparse backbone forward/train, and
// sparsity statistics/export for focal sparse convolutional networks.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"

#include "fscnn/backbone.hpp"
#include "fscnn/image_fusion.hpp"
#include "fscnn/scene.hpp"
#include "fscnn/sparse_tensor.hpp"
#include "fscnn/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using Scalar = float;

namespace {

std::array<double, 3> parse_vec3(const json& j, const char* what) {
    if (!j.is_array() || j.size() != 3) throw std::invalid_argument(std::string("config: ") + what + " must be [x,y,z]");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

fscnn::Shape3 parse_shape3(const json& j, const char* what) {
    auto v = parse_vec3(j, what);
    return {std::int32_t(v[0]), std::int32_t(v[1]), std::int32_t(v[2])};
}

fscnn::GtBox parse_box(const json& j) {
    fscnn::GtBox b;
    b.center = parse_vec3(j.at("center"), "box center");
    b.size = parse_vec3(j.at("size"), "box size");
    b.yaw = j.value("yaw", 0.0);
    return b;
}

json box_to_json(const fscnn::GtBox& b) {
    return json{{"center", {b.center[0], b.center[1], b.center[2]}},
                {"size", {b.size[0], b.size[1], b.size[2]}},
                {"yaw", b.yaw}};
}

fscnn::SceneSpec parse_scene_spec(const json& j) {
    fscnn::SceneSpec spec;
    if (j.contains("grid_shape")) spec.grid_shape = parse_shape3(j.at("grid_shape"), "grid_shape");
    if (j.contains("voxel_size")) spec.voxel_size = parse_vec3(j.at("voxel_size"), "voxel_size");
    if (j.contains("origin")) spec.origin = parse_vec3(j.at("origin"), "origin");
    spec.n_background = j.value("n_background", spec.n_background);
    spec.n_channels = j.value("n_channels", spec.n_channels);
    spec.seed = j.value("seed", spec.seed);
    if (j.contains("boxes"))
        for (const auto& jb : j.at("boxes")) spec.boxes.push_back({parse_box(jb), jb.value("density", 1.0)});
    spec.validate();
    return spec;
}

struct NetConfig {
    fscnn::BackboneSpec spec;
    std::uint64_t seed = 0;
    std::array<double, 3> voxel_size{0.05, 0.05, 0.1};
    std::array<double, 3> origin{0, 0, 0};
};

fscnn::BlockStyle parse_block_style(const std::string& s) {
    if (s == "plain") return fscnn::BlockStyle::plain;
    if (s == "residual_pair") return fscnn::BlockStyle::residual_pair;
    throw std::invalid_argument("config: unknown block_style '" + s + "'");
}

NetConfig parse_net_config(const json& j) {
    NetConfig cfg;
    const std::int32_t in_channels = j.value("in_channels", 2);
    if (j.contains("preset")) {
        cfg.spec = fscnn::preset_by_name(j.at("preset").get<std::string>(), in_channels);
    } else {
        cfg.spec.in_channels = in_channels;
        cfg.spec.stem_channels = j.value("stem_channels", 16);
        if (!j.contains("stages") || j.at("stages").size() != 4)
            throw std::invalid_argument("config: expected a preset or exactly 4 stages");
        for (std::size_t s = 0; s < 4; ++s) {
            const auto& js = j.at("stages")[s];
            fscnn::StageSpec st;
            st.out_channels = js.value("out_channels", 16);
            st.n_subm_blocks = js.value("n_subm_blocks", 2);
            st.downsample = js.value("downsample", s != 0);
            st.block_style = parse_block_style(js.value("block_style", std::string("plain")));
            st.focal_at_last_layer = js.value("focal", false);
            st.fusion_at_last_layer = js.value("fusion", false);
            cfg.spec.stages[s] = st;
        }
    }
    if (j.contains("focal_stages")) fscnn::set_focal_stages(cfg.spec, j.at("focal_stages").get<std::vector<std::int32_t>>());
    if (j.contains("fusion_stages"))
        fscnn::set_fusion_stages(cfg.spec, j.at("fusion_stages").get<std::vector<std::int32_t>>());
    cfg.spec.tau = j.value("tau", cfg.spec.tau);
    cfg.spec.attention = j.value("attention", cfg.spec.attention);
    cfg.spec.loss_weight = j.value("loss_weight", cfg.spec.loss_weight);
    cfg.spec.branch_kernel = j.value("branch_kernel", cfg.spec.branch_kernel);
    cfg.spec.topk = j.value("topk", cfg.spec.topk);
    cfg.spec.top_k_ratio = j.value("top_k_ratio", cfg.spec.top_k_ratio);
    cfg.spec.restrict_to_input = j.value("restrict_to_input", cfg.spec.restrict_to_input);
    if (j.contains("fusion_scope")) {
        const std::string s = j.at("fusion_scope").get<std::string>();
        if (s == "important")
            cfg.spec.fusion_scope = fscnn::FusionScope::important;
        else if (s == "all")
            cfg.spec.fusion_scope = fscnn::FusionScope::all;
        else
            throw std::invalid_argument("config: fusion_scope must be 'important' or 'all'");
    }
    cfg.spec.image_c_mid = j.value("image_c_mid", cfg.spec.image_c_mid);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("voxel_size")) cfg.voxel_size = parse_vec3(j.at("voxel_size"), "voxel_size");
    if (j.contains("origin")) cfg.origin = parse_vec3(j.at("origin"), "origin");
    cfg.spec.validate();
    return cfg;
}

json load_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path);
    json j;
    is >> j;
    return j;
}

struct SceneSidecar {
    std::vector<fscnn::GtBox> boxes;
    bool has_geometry = false;
    std::array<double, 3> voxel_size{0.05, 0.05, 0.1};
    std::array<double, 3> origin{0, 0, 0};
};

SceneSidecar load_sidecar(const std::string& svox_path) {
    SceneSidecar sc;
    const std::string path = svox_path + ".boxes.json";
    if (!fs::exists(path)) return sc;
    json j = load_json_file(path);
    if (j.contains("voxel_size")) {
        sc.voxel_size = parse_vec3(j.at("voxel_size"), "voxel_size");
        sc.has_geometry = true;
    }
    if (j.contains("origin")) sc.origin = parse_vec3(j.at("origin"), "origin");
    if (j.contains("boxes"))
        for (const auto& jb : j.at("boxes")) sc.boxes.push_back(parse_box(jb));
    return sc;
}

// Optional image sidecars for multi-modal nets: <scene>.view<k>.ppm plus
// <scene>.view<k>.calib, k = 0..5.
std::vector<fscnn::RawImageView<Scalar>> load_views(const std::string& svox_path) {
    std::vector<fscnn::RawImageView<Scalar>> views;
    for (int k = 0; k < 6; ++k) {
        const std::string img = svox_path + ".view" + std::to_string(k) + ".ppm";
        const std::string cal = svox_path + ".view" + std::to_string(k) + ".calib";
        if (!fs::exists(img) || !fs::exists(cal)) break;
        fscnn::RawImageView<Scalar> v;
        v.image = fscnn::read_pnm_file<Scalar>(img);
        v.calib = fscnn::read_calib_file(cal);
        views.push_back(std::move(v));
    }
    return views;
}

void write_stats_csv(const std::string& path, const std::vector<fscnn::LayerDiag>& diags) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::invalid_argument("stats: cannot open " + path);
    os << "layer,n_in,n_imp,n_out,tau\n";
    for (const auto& d : diags) {
        os << d.name << ',' << d.n_in << ',';
        if (d.n_imp < 0)
            os << "na";
        else
            os << d.n_imp;
        os << ',' << d.n_out << ',';
        if (d.tau < 0)
            os << "na";
        else
            os << fscnn::detail::format_real(d.tau);
        os << '\n';
    }
}

bool needs_fusion(const fscnn::BackboneSpec& spec) {
    for (const auto& st : spec.stages)
        if (st.fusion_at_last_layer) return true;
    return false;
}

int run_gen(const std::string& spec_path, const std::string& out_path) {
    auto spec = parse_scene_spec(load_json_file(spec_path));
    auto scene = fscnn::gen_scene<Scalar>(spec);
    auto vox = fscnn::voxelize(scene.points, spec.voxel_size, spec.origin, spec.grid_shape);
    fscnn::write_svox_file(out_path, vox.tensor);
    json sidecar;
    sidecar["voxel_size"] = {spec.voxel_size[0], spec.voxel_size[1], spec.voxel_size[2]};
    sidecar["origin"] = {spec.origin[0], spec.origin[1], spec.origin[2]};
    sidecar["boxes"] = json::array();
    for (const auto& b : scene.boxes) sidecar["boxes"].push_back(box_to_json(b));
    std::ofstream os(out_path + ".boxes.json", std::ios::binary);
    os << sidecar.dump(2) << '\n';
    std::cout << "gen: " << scene.points.rows << " points -> " << vox.tensor.size() << " voxels ("
              << vox.dropped << " dropped) -> " << out_path << '\n';
    return 0;
}

int run_forward(const std::string& config_path, const std::string& in_path, const std::string& stats_path,
                const std::string& ckpt_path) {
    auto cfg = parse_net_config(load_json_file(config_path));
    auto input = fscnn::read_svox_file<Scalar>(in_path);
    if (input.channels() != cfg.spec.in_channels)
        throw std::invalid_argument("forward: scene channel count does not match net config");
    auto bb = fscnn::build_backbone<Scalar>(cfg.spec, cfg.seed);
    if (!ckpt_path.empty()) bb.load_checkpoint(fscnn::read_checkpoint_file(ckpt_path), true);

    auto sidecar = load_sidecar(in_path);
    if (sidecar.has_geometry) {
        cfg.voxel_size = sidecar.voxel_size;
        cfg.origin = sidecar.origin;
    }
    fscnn::ForwardContext<Scalar> ctx;
    ctx.voxel_size = cfg.voxel_size;
    ctx.origin = cfg.origin;
    std::vector<std::vector<fscnn::GtBox>> boxes;
    if (!sidecar.boxes.empty()) {
        boxes.push_back(sidecar.boxes);
        ctx.boxes = &boxes;
    }
    std::vector<std::vector<fscnn::RawImageView<Scalar>>> views;
    if (needs_fusion(cfg.spec)) {
        views.push_back(load_views(in_path));
        if (views.back().empty())
            std::cerr << "forward: fusion layers configured but no image sidecars found; using zero image features\n";
        ctx.views = &views;
    }
    auto out = bb.forward(input, ctx);
    write_stats_csv(stats_path, ctx.diags);
    for (const auto& d : ctx.diags)
        std::cout << fscnn::focal_diag_line(d.name, d.n_in, d.n_imp, d.n_out, d.tau) << '\n';
    std::cout << "n_out=" << out.size() << " obj_loss=" << fscnn::detail::format_real(ctx.objective_loss);
    if (ctx.boxes) {
        std::cout << " recall=" << fscnn::detail::format_real(ctx.first_focal_recall) << " fg_share="
                  << fscnn::detail::format_real(
                         fscnn::foreground_share(out, boxes, cfg.voxel_size, cfg.origin));
    }
    std::cout << '\n';
    return 0;
}

std::vector<std::string> list_svox(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".svox") paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw std::invalid_argument("train: no .svox scenes in " + dir);
    return paths;
}

int run_train(const std::string& config_path, const std::string& train_cfg_path, const std::string& scenes_dir,
              const std::string& out_path, const std::string& log_path) {
    auto cfg = parse_net_config(load_json_file(config_path));
    json jt = load_json_file(train_cfg_path);
    fscnn::TrainConfig tc;
    tc.steps = jt.value("steps", tc.steps);
    tc.batch_size = jt.value("batch_size", tc.batch_size);
    tc.lr = jt.value("lr", tc.lr);
    tc.seed = jt.value("seed", tc.seed);
    const std::string opt = jt.value("optimizer", std::string("adam"));
    if (opt == "adam")
        tc.optimizer = fscnn::OptimizerKind::adam;
    else if (opt == "sgd")
        tc.optimizer = fscnn::OptimizerKind::sgd;
    else
        throw std::invalid_argument("config: optimizer must be 'sgd' or 'adam'");
    // training-time overrides of the focal knobs
    cfg.spec.tau = jt.value("tau", cfg.spec.tau);
    cfg.spec.attention = jt.value("attention", cfg.spec.attention);
    cfg.spec.loss_weight = jt.value("loss_weight", cfg.spec.loss_weight);
    tc.validate();

    std::vector<fscnn::TrainScene<Scalar>> scenes;
    std::vector<std::vector<fscnn::RawImageView<Scalar>>> views;
    bool any_views = false;
    for (const auto& path : list_svox(scenes_dir)) {
        fscnn::TrainScene<Scalar> sc;
        sc.tensor = fscnn::read_svox_file<Scalar>(path);
        auto sidecar = load_sidecar(path);
        sc.boxes = sidecar.boxes;
        if (sidecar.has_geometry) {
            cfg.voxel_size = sidecar.voxel_size;
            cfg.origin = sidecar.origin;
        }
        if (needs_fusion(cfg.spec)) {
            views.push_back(load_views(path));
            any_views = any_views || !views.back().empty();
        }
        scenes.push_back(std::move(sc));
    }
    if (needs_fusion(cfg.spec) && !any_views)
        std::cerr << "train: fusion layers configured but no image sidecars found; using zero image features\n";

    auto bb = fscnn::build_backbone<Scalar>(cfg.spec, cfg.seed);
    std::mt19937_64 head_rng(cfg.seed + 1);
    fscnn::ProxyHead<Scalar> head(cfg.spec.stages[3].out_channels, head_rng);

    // batching with per-scene views only supports batch 1 (one view set per pass)
    const std::vector<std::vector<fscnn::RawImageView<Scalar>>>* view_ptr = nullptr;
    if (needs_fusion(cfg.spec) && any_views) {
        if (tc.batch_size != 1)
            throw std::invalid_argument("train: multi-modal training requires batch_size 1");
        view_ptr = &views;
    }

    std::vector<fscnn::MetricsRow> log;
    if (view_ptr == nullptr) {
        log = fscnn::train(bb, head, scenes, tc, cfg.voxel_size, cfg.origin);
    } else {
        // per-step view selection mirrors the round-robin scene order
        fscnn::Optimizer<Scalar> optimizer(tc.optimizer, tc.lr);
        auto params = bb.params();
        head.collect_params(params);
        for (std::int64_t step = 0; step < tc.steps; ++step) {
            const std::size_t idx = std::size_t(step % std::int64_t(scenes.size()));
            std::vector<std::vector<fscnn::GtBox>> batch_boxes{scenes[idx].boxes};
            std::vector<std::vector<fscnn::RawImageView<Scalar>>> batch_views{views[idx]};
            fscnn::ForwardContext<Scalar> ctx;
            ctx.boxes = &batch_boxes;
            ctx.voxel_size = cfg.voxel_size;
            ctx.origin = cfg.origin;
            ctx.views = &batch_views;
            auto out = bb.forward(scenes[idx].tensor, ctx);
            auto logits = fscnn::mlp(out, head.w, head.b);
            const auto targets = fscnn::voxel_targets_batched(out, batch_boxes, cfg.voxel_size, cfg.origin);
            auto [bce, d_logits] = fscnn::bce_with_logits(logits.features, targets);
            const double total = bce + ctx.objective_loss;
            if (!std::isfinite(total)) throw fscnn::numerical_error("training diverged: non-finite loss");
            bb.zero_grad();
            head.zero_grad();
            auto hg = fscnn::mlp_backward(out, head.w, d_logits);
            for (std::size_t i = 0; i < head.w.v.size(); ++i) head.d_w.v[i] += hg.d_w.v[i];
            for (std::size_t i = 0; i < head.b.size(); ++i) head.d_b[i] += hg.d_bias[i];
            bb.backward(hg.d_input);
            optimizer.step(params);
            fscnn::MetricsRow row;
            row.step = step;
            row.loss = total;
            row.obj_loss = ctx.objective_loss;
            row.recall = ctx.first_focal_recall < 0 ? 0.0 : ctx.first_focal_recall;
            for (const auto& d : ctx.diags) row.layer_n_out.push_back(d.n_out);
            log.push_back(std::move(row));
        }
    }

    fscnn::write_checkpoint_file(out_path, bb.to_checkpoint());
    {
        std::ofstream os(out_path + ".json", std::ios::binary);
        os << load_json_file(config_path).dump(2) << '\n';
    }
    const std::string metrics_path = log_path.empty() ? out_path + ".metrics.csv" : log_path;
    std::ofstream os(metrics_path, std::ios::binary);
    fscnn::write_metrics_csv(os, log);
    std::cout << "train: " << log.size() << " steps, final loss " << fscnn::detail::format_real(log.back().loss)
              << ", obj " << fscnn::detail::format_real(log.back().obj_loss) << ", recall "
              << fscnn::detail::format_real(log.back().recall) << " -> " << out_path << '\n';
    return 0;
}

int run_export(const std::string& ckpt_path, const std::string& in_path, const std::string& ply_path,
               const std::string& calib_path, const std::string& csv_path, std::string config_path) {
    if (config_path.empty()) {
        config_path = ckpt_path + ".json";
        if (!fs::exists(config_path))
            throw std::invalid_argument("export: no --config given and no " + config_path + " sidecar");
    }
    auto cfg = parse_net_config(load_json_file(config_path));
    auto input = fscnn::read_svox_file<Scalar>(in_path);
    auto sidecar = load_sidecar(in_path);
    if (sidecar.has_geometry) {
        cfg.voxel_size = sidecar.voxel_size;
        cfg.origin = sidecar.origin;
    }

    auto bb = fscnn::build_backbone<Scalar>(cfg.spec, cfg.seed);
    bb.load_checkpoint(fscnn::read_checkpoint_file(ckpt_path), true);
    fscnn::ForwardContext<Scalar> ctx;
    ctx.voxel_size = cfg.voxel_size;
    ctx.origin = cfg.origin;
    std::vector<std::vector<fscnn::GtBox>> boxes;
    if (!sidecar.boxes.empty()) {
        boxes.push_back(sidecar.boxes);
        ctx.boxes = &boxes;
    }
    std::vector<std::vector<fscnn::RawImageView<Scalar>>> views;
    if (needs_fusion(cfg.spec)) {
        views.push_back(load_views(in_path));
        ctx.views = &views;
    }
    auto out = bb.forward(input, ctx);

    // plain twin on the same scene and weights for the sparsity comparison
    auto plain = fscnn::build_backbone<Scalar>(fscnn::strip_focal(cfg.spec), cfg.seed);
    plain.load_checkpoint(fscnn::read_checkpoint_file(ckpt_path), true);
    fscnn::ForwardContext<Scalar> plain_ctx;
    plain_ctx.voxel_size = cfg.voxel_size;
    plain_ctx.origin = cfg.origin;
    if (!boxes.empty()) plain_ctx.boxes = &boxes;
    auto plain_out = plain.forward(input, plain_ctx);

    for (const auto& d : ctx.diags)
        std::cout << fscnn::focal_diag_line(d.name, d.n_in, d.n_imp, d.n_out, d.tau) << '\n';
    std::cout << "focal n_out=" << out.size() << " plain n_out=" << plain_out.size() << '\n';
    if (!boxes.empty()) {
        std::cout << "focal fg_share=" << fscnn::detail::format_real(
                         fscnn::foreground_share(out, boxes, cfg.voxel_size, cfg.origin))
                  << " plain fg_share=" << fscnn::detail::format_real(
                         fscnn::foreground_share(plain_out, boxes, cfg.voxel_size, cfg.origin))
                  << '\n';
    }

    std::vector<std::array<double, 3>> centers;
    std::vector<std::vector<double>> extras;
    std::vector<std::string> extra_names;
    if (!calib_path.empty()) {
        auto calib = fscnn::read_calib_file(calib_path);
        extras.assign(2, {});
        extra_names = {"u", "v"};
        for (std::int64_t i = 0; i < out.size(); ++i) {
            const auto c = fscnn::voxel_center(out, i, cfg.voxel_size, cfg.origin);
            const auto hom = calib.project(c);
            if (!(hom[2] > 0)) continue;
            centers.push_back(c);
            extras[0].push_back(hom[0] / hom[2]);
            extras[1].push_back(hom[1] / hom[2]);
        }
    } else {
        for (std::int64_t i = 0; i < out.size(); ++i)
            centers.push_back(fscnn::voxel_center(out, i, cfg.voxel_size, cfg.origin));
    }
    {
        std::ofstream os(ply_path, std::ios::binary);
        if (!os) throw std::invalid_argument("export: cannot open " + ply_path);
        fscnn::write_ply(os, centers, extra_names, extras);
    }
    if (!csv_path.empty()) {
        std::ofstream os(csv_path, std::ios::binary);
        os << "x,y,z";
        for (const auto& n : extra_names) os << ',' << n;
        os << '\n';
        for (std::size_t i = 0; i < centers.size(); ++i) {
            os << fscnn::detail::format_real(centers[i][0]) << ',' << fscnn::detail::format_real(centers[i][1])
               << ',' << fscnn::detail::format_real(centers[i][2]);
            for (const auto& col : extras) os << ',' << fscnn::detail::format_real(col[i]);
            os << '\n';
        }
    }
    std::cout << "export: " << centers.size() << " points -> " << ply_path << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"focal sparse convolution harness"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "cap worker threads (0 = library default)");

    std::string gen_spec, gen_out;
    auto* gen = app.add_subcommand("gen", "generate a synthetic scene");
    gen->add_option("--spec", gen_spec, "scene spec JSON")->required();
    gen->add_option("--out", gen_out, "output .svox path")->required();

    std::string fwd_config, fwd_in, fwd_stats, fwd_ckpt;
    auto* fwd = app.add_subcommand("forward", "run the backbone on a scene");
    fwd->add_option("--config", fwd_config, "net config JSON")->required();
    fwd->add_option("--in", fwd_in, "input .svox scene")->required();
    fwd->add_option("--stats", fwd_stats, "per-layer stats CSV output")->required();
    fwd->add_option("--ckpt", fwd_ckpt, "optional checkpoint to load");

    std::string tr_config, tr_traincfg, tr_scenes, tr_out, tr_log;
    auto* tr = app.add_subcommand("train", "train on a directory of scenes");
    tr->add_option("--config", tr_config, "net config JSON")->required();
    tr->add_option("--train-cfg", tr_traincfg, "training config JSON")->required();
    tr->add_option("--scenes", tr_scenes, "directory of .svox scenes")->required();
    tr->add_option("--out", tr_out, "output checkpoint path")->required();
    tr->add_option("--log", tr_log, "metrics CSV path (default: <out>.metrics.csv)");

    std::string ex_ckpt, ex_in, ex_ply, ex_calib, ex_csv, ex_config;
    auto* ex = app.add_subcommand("export", "sparsity stats and point exports");
    ex->add_option("--ckpt", ex_ckpt, "checkpoint to load")->required();
    ex->add_option("--in", ex_in, "input .svox scene")->required();
    ex->add_option("--ply", ex_ply, "output PLY path")->required();
    ex->add_option("--calib", ex_calib, "optional 3x4 calibration for pixel projection");
    ex->add_option("--csv", ex_csv, "optional CSV point list");
    ex->add_option("--config", ex_config, "net config JSON (default: <ckpt>.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#endif

    try {
        if (gen->parsed()) return run_gen(gen_spec, gen_out);
        if (fwd->parsed()) return run_forward(fwd_config, fwd_in, fwd_stats, fwd_ckpt);
        if (tr->parsed()) return run_train(tr_config, tr_traincfg, tr_scenes, tr_out, tr_log);
        if (ex->parsed()) return run_export(ex_ckpt, ex_in, ex_ply, ex_calib, ex_csv, ex_config);
    } catch (const fscnn::numerical_error& e) {
        std::cerr << "fscnn: numerical abort: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "fscnn: error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
