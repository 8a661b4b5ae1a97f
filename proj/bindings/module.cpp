#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cycgrid/checkpoint.hpp"
#include "cycgrid/config.hpp"
#include "cycgrid/cycle_grpo.hpp"
#include "cycgrid/eval.hpp"
#include "cycgrid/metrics.hpp"
#include "cycgrid/model.hpp"
#include "cycgrid/render.hpp"
#include "cycgrid/rewards.hpp"
#include "cycgrid/sft.hpp"
#include "cycgrid/tokenizer.hpp"
#include "cycgrid/world.hpp"

namespace py = pybind11;
using namespace cycgrid;

namespace {

RunConfig config_from_dict(const py::dict& d) {
    nlohmann::json j;
    for (auto item : d) {
        const auto key = py::cast<std::string>(item.first);
        if (py::isinstance<py::bool_>(item.second)) j[key] = py::cast<bool>(item.second);
        else if (py::isinstance<py::int_>(item.second)) j[key] = py::cast<int64_t>(item.second);
        else if (py::isinstance<py::float_>(item.second)) j[key] = py::cast<double>(item.second);
        else j[key] = py::cast<std::string>(item.second);
    }
    return config_from_json(j);
}

py::object json_to_py(const nlohmann::json& j) {
    py::module_ json_mod = py::module_::import("json");
    return json_mod.attr("loads")(j.dump());
}

std::vector<int> image_cells(const GridImage& img) {
    return std::vector<int>(img.cells.begin(), img.cells.end());
}

GridImage image_from_cells(const std::vector<int>& cells) {
    if (cells.size() != kGrid * kGrid) throw std::runtime_error("image needs 256 cells");
    GridImage img;
    for (size_t i = 0; i < cells.size(); ++i) {
        if (cells[i] < 0 || cells[i] > kNumClasses)
            throw std::runtime_error("cell class out of range 0..6");
        img.cells[i] = static_cast<uint8_t>(cells[i]);
    }
    return img;
}

}  // namespace

PYBIND11_MODULE(cycgrid, m) {
    m.doc() = "cycle-consistent layout/image trainer on a 16x16 rectangle world";

    py::class_<BoxSpec>(m, "BoxSpec")
        .def(py::init([](int cls, int x0, int y0, int x1, int y1) {
                 return BoxSpec{cls, x0, y0, x1, y1};
             }),
             py::arg("cls"), py::arg("x0"), py::arg("y0"), py::arg("x1"), py::arg("y1"))
        .def_readwrite("cls", &BoxSpec::cls)
        .def_readwrite("x0", &BoxSpec::x0)
        .def_readwrite("y0", &BoxSpec::y0)
        .def_readwrite("x1", &BoxSpec::x1)
        .def_readwrite("y1", &BoxSpec::y1)
        .def("__repr__", [](const BoxSpec& b) {
            return "BoxSpec(cls=" + std::to_string(b.cls) + ", " + std::to_string(b.x0) + "," +
                   std::to_string(b.y0) + "," + std::to_string(b.x1) + "," + std::to_string(b.y1) +
                   ")";
        });

    py::class_<Scene>(m, "Scene")
        .def(py::init<>())
        .def_readwrite("id", &Scene::id)
        .def_readwrite("boxes", &Scene::boxes)
        .def_property(
            "difficulty", [](const Scene& s) { return std::string(to_string(s.difficulty)); },
            [](Scene& s, const std::string& d) { s.difficulty = difficulty_from_string(d); });

    py::class_<GridImage>(m, "GridImage")
        .def(py::init<>())
        .def(py::init(&image_from_cells), py::arg("cells"))
        .def("cells", &image_cells)
        .def("at", [](const GridImage& img, int x, int y) { return static_cast<int>(img.at(x, y)); });

    py::class_<Layout>(m, "Layout")
        .def(py::init<>())
        .def(py::init([](std::vector<BoxSpec> boxes) { return Layout{std::move(boxes)}; }))
        .def_readwrite("instances", &Layout::instances);

    // world
    m.def("sample_scene", [](uint64_t seed, const std::string& tier) {
        Rng rng(seed);
        return sample_scene(rng, difficulty_from_string(tier), WorldConfig{});
    });
    m.def("rasterize", &rasterize);
    m.def("oracle_parse", &oracle_parse);
    m.def("overlap_score", &overlap_score);
    m.def("layout_of", &layout_of);
    m.def("write_dataset", &write_dataset);
    m.def("read_dataset", &read_dataset);

    // tokenizer
    m.def("encode_layout", &encode_layout);
    m.def("decode_layout", [](const std::vector<int>& seq, bool strict) {
        return decode_layout(seq, strict ? DecodeMode::Strict : DecodeMode::Lenient);
    }, py::arg("seq"), py::arg("strict") = false);
    m.def("encode_image", &encode_image);
    m.def("decode_image", &decode_image);
    m.def("vocab_tsv", &vocab_tsv);
    m.def("vocab_hash", &vocab_hash);

    // rewards
    m.def("box_iou", &box_iou);
    m.def("match_layouts_mean_iou",
          [](const Layout& pred, const Layout& gt) { return match_layouts(pred, gt).mean_iou; });
    m.def("clip_proxy", &clip_proxy);
    m.def("hps_proxy", &hps_proxy);
    m.def("reward_r1_total", [](const Layout& lp, const Layout& lg, const GridImage& ip,
                                const GridImage& ig, double li, double lc, double lh) {
        return reward_r1(lp, lg, ip, ig, RewardWeights{li, lc, lh}).total;
    });
    m.def("reward_r2_total", [](const Layout& lp, const Layout& lg, const GridImage& ip, double li,
                                double lc, double lh) {
        return reward_r2(lp, lg, ip, RewardWeights{li, lc, lh}).total;
    });
    m.def("advantages", &advantages, py::arg("rewards"), py::arg("adv_eps") = 1e-8);

    // model / pipeline
    m.def("grad_check", [](int d_model, int n_layers, int n_samples, double tolerance,
                           uint64_t seed) {
        ModelConfig mc;
        mc.d_model = d_model;
        mc.n_layers = n_layers;
        const GradCheckReport rep = grad_check(mc, n_samples, 1e-6, tolerance, seed);
        py::dict out;
        out["max_rel"] = rep.max_rel;
        out["mean_rel"] = rep.mean_rel;
        out["n_checked"] = rep.n_checked;
        out["pass"] = rep.pass;
        out["worst_param"] = rep.worst_param;
        return out;
    }, py::arg("d_model") = 32, py::arg("n_layers") = 2, py::arg("n_samples") = 64,
       py::arg("tolerance") = 1e-6, py::arg("seed") = 0);

    m.def("run_sft", [](const std::string& data_path, const py::dict& cfg_dict,
                        const std::string& out_checkpoint, const std::string& metrics_path) {
        const RunConfig cfg = config_from_dict(cfg_dict);
        const auto dataset = read_dataset(data_path);
        std::optional<MetricsWriter> metrics;
        if (!metrics_path.empty()) metrics.emplace(metrics_path);
        run_sft(dataset, cfg.sft(), cfg.model(), metrics ? &*metrics : nullptr, out_checkpoint);
    }, py::arg("data_path"), py::arg("config"), py::arg("out_checkpoint"),
       py::arg("metrics_path") = "");

    m.def("train_rl", [](const std::string& sft_checkpoint, const std::string& data_path,
                         const py::dict& cfg_dict, const std::string& mode,
                         const std::string& out_checkpoint, const std::string& metrics_path) {
        const RunConfig cfg = config_from_dict(cfg_dict);
        const auto dataset = read_dataset(data_path);
        const Policy sft_policy = load_checkpoint(sft_checkpoint).policy;
        std::optional<MetricsWriter> metrics;
        if (!metrics_path.empty()) metrics.emplace(metrics_path);
        const Policy trained = train_rl(sft_policy, dataset, cfg.grpo(),
                                        rl_mode_from_string(mode),
                                        metrics ? &*metrics : nullptr);
        if (!out_checkpoint.empty()) save_checkpoint(trained, nullptr, out_checkpoint);
    }, py::arg("sft_checkpoint"), py::arg("data_path"), py::arg("config"), py::arg("mode"),
       py::arg("out_checkpoint"), py::arg("metrics_path") = "");

    m.def("evaluate_checkpoint", [](const std::string& checkpoint, const std::string& data_path,
                                    const py::dict& cfg_dict) {
        const RunConfig cfg = config_from_dict(cfg_dict);
        const auto dataset = read_dataset(data_path);
        const Policy policy = load_checkpoint(checkpoint).policy;
        const EvalReport rep = evaluate(policy_und_fn(policy), policy_gen_fn(policy), dataset,
                                        cfg.weights(), cfg.effective_threads());
        return json_to_py(rep.to_json());
    });

    m.def("predict_layout", [](const std::string& checkpoint, const GridImage& img) {
        const Policy policy = load_checkpoint(checkpoint).policy;
        return policy_und_fn(policy)(img);
    });
    m.def("generate_image", [](const std::string& checkpoint, const Layout& layout) {
        const Policy policy = load_checkpoint(checkpoint).policy;
        return policy_gen_fn(policy)(layout);
    });
    m.def("render_ppm", &render_ppm, py::arg("img"), py::arg("path"), py::arg("scale") = 16);
}
