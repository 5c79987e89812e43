#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dmtd/bench.hpp"
#include "dmtd/checkpoint.hpp"
#include "dmtd/cli.hpp"
#include "dmtd/config.hpp"
#include "dmtd/corpus.hpp"
#include "dmtd/errors.hpp"
#include "dmtd/infer.hpp"
#include "dmtd/train.hpp"

namespace py = pybind11;
using namespace dmtd;

namespace {

CyclePlan make_plan(int tau_train, int tau_infer, const std::string& variant, int anchor) {
  CyclePlan p;
  p.tau_train = tau_train;
  p.tau_infer = tau_infer;
  p.variant = parse_variant(variant);
  p.mask_anchor = anchor;
  return p;
}

std::vector<int> flatten(const py::array_t<int, py::array::c_style | py::array::forcecast>& tokens, int& seq_len) {
  if (tokens.ndim() != 2) throw DimensionError("tokens must be a 2-D [batch, seq_len] array");
  seq_len = static_cast<int>(tokens.shape(1));
  return {tokens.data(), tokens.data() + tokens.size()};
}

py::array_t<float> masked_forward_py(const Model<float>& model,
                                     const py::array_t<int, py::array::c_style | py::array::forcecast>& tokens, int tau,
                                     const std::string& variant, int anchor) {
  int seq_len = 0;
  const auto flat = flatten(tokens, seq_len);
  Tensor logits;
  {
    NoGradGuard no_grad;
    logits = masked_forward(model, flat, seq_len, make_plan(tau, tau, variant, anchor));
  }
  const auto V = static_cast<py::ssize_t>(model.config().vocab_size);
  py::array_t<float> out({static_cast<py::ssize_t>(tokens.shape(0)), static_cast<py::ssize_t>(seq_len), V});
  std::copy(logits.data().begin(), logits.data().end(), out.mutable_data());
  return out;
}

py::dict generate_py(const Model<float>& model, const std::vector<int>& context, int max_new, int tau_infer,
                     int tau_train, const std::string& variant, double temperature, std::uint64_t seed,
                     bool masked_prefill) {
  SamplerConfig sampler;
  sampler.seed = seed;
  if (temperature > 0.0) {
    sampler.mode = SamplerMode::Temperature;
    sampler.temperature = temperature;
  }
  GenerateOptions opt;
  opt.prefill.masked_context = masked_prefill;
  const auto plan = make_plan(tau_train, tau_infer, variant, 0);
  const auto r = generate(model, context, max_new, plan, sampler, opt);
  const auto plt = measure_plt(r.trace, model.partition(), plan.variant, tau_infer,
                               std::max<std::int64_t>(1, static_cast<std::int64_t>(r.tokens.size())));
  py::dict d;
  d["tokens"] = r.tokens;
  d["truncated"] = r.truncated;
  d["layer_invocations"] = r.trace.layer_invocations(model.partition());
  d["plt_measured"] = py::make_tuple(plt.measured.numerator(), plt.measured.denominator());
  d["plt_theoretical"] = py::make_tuple(plt.theoretical.numerator(), plt.theoretical.denominator());
  d["transcript"] = transcript_json(r, model.partition());
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Direct multi-token decoding core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  auto data = py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ChecksumError>(m, "ChecksumError", data.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<IndexError>(m, "TokenIndexError", base.ptr());

  m.def("tokenize", [](const py::bytes& b) { return tokenize(std::string(b)); });
  m.def("detokenize", [](const std::vector<int>& ids) { return py::bytes(detokenize(ids)); });

  m.def("cycle_mask", [](int n, int tau, int anchor) { return build_cycle_mask(n, tau, anchor).bits; },
        py::arg("n"), py::arg("tau"), py::arg("anchor") = 0);

  m.def(
      "plt_theoretical",
      [](int n_layers, int reused, int tau) {
        const auto r = plt_theoretical(n_layers, reused, tau);
        return py::make_tuple(r.numerator(), r.denominator());
      },
      py::arg("n_layers"), py::arg("reused_layers"), py::arg("tau"));

  m.def("fit_scaling_law", [](const std::vector<std::pair<double, double>>& points) {
    const auto f = fit_scaling_law(points);
    py::dict d;
    d["slope"] = f.slope;
    d["intercept"] = f.intercept;
    d["r_squared"] = f.r_squared;
    return d;
  });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_encoding", &ModelConfig::n_encoding)
      .def_readwrite("n_thinking", &ModelConfig::n_thinking)
      .def_readwrite("n_decoding", &ModelConfig::n_decoding)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("seed", &ModelConfig::seed);

  py::class_<Model<float>>(m, "Model")
      .def(py::init<ModelConfig>())
      .def_property_readonly("config", &Model<float>::config)
      .def_property_readonly("parameter_count", &Model<float>::parameter_count)
      .def("masked_forward", &masked_forward_py, py::arg("tokens"), py::arg("tau"),
           py::arg("variant") = "embedding", py::arg("anchor") = 0)
      .def("generate", &generate_py, py::arg("context"), py::arg("max_new"), py::arg("tau_infer"),
           py::arg("tau_train") = 1, py::arg("variant") = "embedding", py::arg("temperature") = 0.0,
           py::arg("seed") = 0, py::arg("masked_prefill") = true)
      .def(
          "evaluate",
          [](const Model<float>& model, const std::vector<std::vector<int>>& windows, int tau,
             const std::string& variant) {
            return evaluate(model, windows, make_plan(tau, tau, variant, 0));
          },
          py::arg("windows"), py::arg("tau"), py::arg("variant") = "embedding");

  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& file) {
        auto ck = load_checkpoint(file);
        py::dict d;
        d["step"] = ck.step;
        d["config"] = to_ini(ck.config);
        d["tau_train"] = ck.config.cycle.tau_train;
        d["variant"] = std::string(variant_name(ck.config.cycle.variant));
        d["model"] = py::cast(std::move(ck.model));
        return d;
      },
      py::arg("path"));

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "dmtd");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, py::bytes(out.str()), err.str());
      },
      py::arg("args"));
}
