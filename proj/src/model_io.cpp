#include "mrr/model_io.hpp"

#include <fstream>
#include <sstream>

#include "mrr/base64.hpp"
#include "mrr/error.hpp"

namespace mrr {

Json doubles_to_json(std::span<const double> values) { return base64::encode_doubles(values); }

std::vector<double> doubles_from_json(const Json& j) { return base64::decode_doubles(j.get<std::string>()); }

Json tensor_to_json(const Tensor& t) { return Json{{"shape", t.shape}, {"data", doubles_to_json(t.data)}}; }

Tensor tensor_from_json(const Json& j) {
  return Tensor(j.at("shape").get<Shape>(), doubles_from_json(j.at("data")));
}

Json network_to_json(const Network& net) {
  Json layers = Json::array();
  for (const auto& layer : net.layers) {
    Json hyper = Json::object();
    const auto& h = layer.hyper;
    switch (layer.kind) {
      case LayerKind::Dense: hyper = {{"in_features", h.in_features}, {"units", h.units}}; break;
      case LayerKind::Conv2D:
        hyper = {{"in_channels", h.in_channels}, {"out_channels", h.out_channels}, {"kernel", h.kernel}};
        break;
      case LayerKind::MaxPool2D: hyper = {{"window", h.window}}; break;
      case LayerKind::L2Normalize: hyper = {{"epsilon", h.epsilon}}; break;
      default: break;
    }
    Json params = Json::array();
    for (const auto& p : layer.params) params.push_back(tensor_to_json(p));
    layers.push_back({{"kind", std::string(to_string(layer.kind))}, {"hyper", hyper}, {"params", params}});
  }
  return {{"format_version", kModelFormatVersion}, {"input_shape", net.input_shape}, {"layers", layers}};
}

Network network_from_json(const Json& j) {
  try {
    if (j.at("format_version").get<int>() != kModelFormatVersion) {
      throw DataError("unsupported model format_version " + j.at("format_version").dump());
    }
    Network net;
    net.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& jl : j.at("layers")) {
      const LayerKind kind = layer_kind_from_string(jl.at("kind").get<std::string>());
      const Json& h = jl.at("hyper");
      Layer layer;
      switch (kind) {
        case LayerKind::Dense: layer = Layer::dense(h.at("in_features"), h.at("units")); break;
        case LayerKind::Conv2D: layer = Layer::conv2d(h.at("in_channels"), h.at("out_channels"), h.at("kernel")); break;
        case LayerKind::MaxPool2D: layer = Layer::max_pool(h.at("window")); break;
        case LayerKind::ReLU: layer = Layer::relu(); break;
        case LayerKind::GlobalAvgPool: layer = Layer::global_avg_pool(); break;
        case LayerKind::L2Normalize: layer = Layer::l2_normalize(h.at("epsilon")); break;
        case LayerKind::Softmax: layer = Layer::softmax(); break;
      }
      const Json& params = jl.at("params");
      if (params.size() != layer.params.size()) {
        throw DataError(layer.describe() + " expects " + std::to_string(layer.params.size()) + " parameter tensors");
      }
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor t = tensor_from_json(params[p]);
        if (t.shape != layer.params[p].shape) {
          throw DataError(layer.describe() + " parameter " + std::to_string(p) + " has shape " +
                          shape_to_string(t.shape) + ", expected " + shape_to_string(layer.params[p].shape));
        }
        layer.params[p] = std::move(t);
      }
      net.layers.push_back(std::move(layer));
    }
    net.activation_shapes();
    return net;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed model JSON: ") + e.what());
  }
}

std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void save_network(const std::filesystem::path& path, const Network& net) {
  write_text_file(path, dump_json(network_to_json(net)));
}

Network load_network(const std::filesystem::path& path) { return network_from_json(read_json_file(path)); }

}  // namespace mrr
