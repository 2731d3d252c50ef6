#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "seibw/binfer.hpp"
#include "seibw/layers.hpp"
#include "seibw/losses.hpp"
#include "seibw/neuron.hpp"
#include "seibw/serialize.hpp"
#include "seibw/tensor.hpp"
#include "seibw/trainer.hpp"

namespace py = pybind11;
using namespace seibw;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

DTensor to_tensor(const Arr& a) {
  std::vector<std::size_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<std::size_t>(a.shape(i));
  DTensor t(shape);
  std::copy(a.data(), a.data() + t.numel(), t.data());
  return t;
}

py::array_t<double> to_array(const DTensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  std::copy(t.data(), t.data() + t.numel(), a.mutable_data());
  return a;
}

LifConfig make_lif(double threshold, double leak, double gamma) {
  LifConfig cfg;
  cfg.v_threshold = threshold;
  cfg.leak = leak;
  cfg.surrogate_width = gamma > 0 ? gamma : threshold;
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_seibw, m) {
  m.doc() = "Core numeric operations of the binary-weight SNN framework";

  m.def(
      "matmul", [](const Arr& a, const Arr& b) { return to_array(matmul(to_tensor(a), to_tensor(b))); },
      py::arg("a"), py::arg("b"));

  m.def(
      "conv2d",
      [](const Arr& x, const Arr& k, std::size_t stride, std::size_t padding) {
        return to_array(conv2d(to_tensor(x), to_tensor(k), stride, padding));
      },
      py::arg("x"), py::arg("kernel"), py::arg("stride") = 1, py::arg("padding") = 0);

  m.def(
      "avg_pool2d",
      [](const Arr& x, std::size_t window, std::size_t stride) {
        return to_array(avg_pool2d(to_tensor(x), window, stride));
      },
      py::arg("x"), py::arg("window"), py::arg("stride"));

  m.def(
      "softmax", [](const Arr& x) { return to_array(softmax(to_tensor(x))); }, py::arg("x"));

  m.def(
      "lif_forward",
      [](const Arr& input_seq, double threshold, double leak, double gamma) {
        auto [spikes, state] = lif_forward(make_lif(threshold, leak, gamma), to_tensor(input_seq));
        return py::make_tuple(to_array(spikes.values), to_array(state.u), to_array(state.v));
      },
      "Runs the leaky integrate-and-fire dynamics over [T, ...] input; "
      "returns (spikes, pre-reset u, post-reset v with leading v[0]=0).",
      py::arg("input_seq"), py::arg("threshold") = 1.0, py::arg("leak") = 0.1,
      py::arg("surrogate_width") = 0.0);

  m.def(
      "triangle_surrogate",
      [](const Arr& u, double threshold, double gamma) {
        return to_array(triangle_surrogate_derivative(make_lif(threshold, 0.1, gamma), to_tensor(u)));
      },
      py::arg("u"), py::arg("threshold") = 1.0, py::arg("surrogate_width") = 0.0);

  m.def(
      "binarize_weights",
      [](const Arr& w) {
        auto [wb, a] = binarize_weights(to_tensor(w));
        return py::make_tuple(to_array(wb), a);
      },
      "Magnitude-aware binarization: (+-a tensor, a = mean(|w|)).", py::arg("w"));

  m.def(
      "ste_weight_gradient",
      [](const Arr& grad, const Arr& w) {
        return to_array(ste_weight_gradient(to_tensor(grad), to_tensor(w)));
      },
      py::arg("grad"), py::arg("w_real"));

  m.def(
      "sws_standardize",
      [](const Arr& w, double gamma, bool fan_in_factor) {
        return to_array(sws_standardize(to_tensor(w), gamma, fan_in_factor));
      },
      py::arg("w"), py::arg("gamma") = 2.74, py::arg("fan_in_factor") = true);

  m.def(
      "kl_snn_loss",
      [](const Arr& logits, const Arr& teacher) {
        TeacherProbsT<double> t;
        t.probs = to_tensor(teacher);
        auto r = kl_snn_loss(to_tensor(logits), t);
        return py::make_tuple(r.loss, to_array(r.grad));
      },
      py::arg("student_logits"), py::arg("teacher_probs"));

  m.def(
      "tet_ce_loss",
      [](const Arr& logits, const std::vector<std::int32_t>& labels) {
        auto r = tet_ce_loss(to_tensor(logits), labels);
        return py::make_tuple(r.loss, to_array(r.grad));
      },
      py::arg("student_logits"), py::arg("labels"));

  m.def(
      "membrane_regularizer",
      [](const Arr& outputs, double v_threshold) {
        auto r = membrane_regularizer(to_tensor(outputs), v_threshold);
        return py::make_tuple(r.loss, to_array(r.grad));
      },
      py::arg("outputs"), py::arg("v_threshold") = 1.0);

  m.def(
      "combined_loss",
      [](const Arr& logits, const Arr& teacher, const std::vector<std::int32_t>& labels,
         double lambda_reg, double v_threshold) {
        LossConfig cfg;
        cfg.lambda_reg = lambda_reg;
        cfg.v_threshold = v_threshold;
        TeacherProbsT<double> t;
        t.probs = to_tensor(teacher);
        auto r = combined_loss(cfg, to_tensor(logits), t, labels);
        return py::make_tuple(r.loss, to_array(r.grad));
      },
      py::arg("student_logits"), py::arg("teacher_probs"), py::arg("labels"),
      py::arg("lambda_reg") = 0.0, py::arg("v_threshold") = 1.0);

  m.def("cosine_lr", &cosine_lr, py::arg("base_lr"), py::arg("epoch"), py::arg("total_epochs"));

  m.def(
      "binary_dot",
      [](const Arr& w_row, const Arr& spikes) {
        LayerParams<double> p;
        p.mode = WeightMode::binary;
        DTensor w = to_tensor(w_row);
        p.init({1, w.numel()}, false);
        p.w_real = w.reshaped({1, w.numel()});
        p.refresh();
        auto packed = pack_layer(p);
        DTensor s = to_tensor(spikes);
        auto words = pack_spikes(s.data(), s.numel());
        return popcount_dot(packed, words, 0);
      },
      "Bit-packed spike/binary-weight dot product via masked popcounts.",
      py::arg("w_row"), py::arg("spikes"));

  m.def(
      "direct_encode",
      [](const Arr& sample, std::size_t horizon) {
        return to_array(direct_encode(to_tensor(sample), horizon));
      },
      py::arg("sample"), py::arg("horizon"));

  m.def(
      "read_container",
      [](const std::string& path) {
        py::dict out;
        for (const auto& rec : read_container(path)) {
          std::vector<py::ssize_t> shape(rec.tensor.shape().begin(), rec.tensor.shape().end());
          py::array_t<float> a(shape);
          std::copy(rec.tensor.data(), rec.tensor.data() + rec.tensor.numel(), a.mutable_data());
          out[py::str(rec.name)] = a;
        }
        return out;
      },
      py::arg("path"));

  m.def(
      "write_container",
      [](const std::string& path, const py::dict& records) {
        std::vector<NamedTensor> recs;
        for (auto item : records) {
          py::array_t<float, py::array::c_style | py::array::forcecast> a =
              py::cast<py::array>(item.second);
          std::vector<std::size_t> shape(a.ndim());
          for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = a.shape(i);
          Tensor t(shape);
          std::copy(a.data(), a.data() + t.numel(), t.data());
          recs.push_back({py::cast<std::string>(item.first), std::move(t)});
        }
        write_container(path, recs);
      },
      py::arg("path"), py::arg("records"));

  m.attr("__version__") = "0.1.0";
}
