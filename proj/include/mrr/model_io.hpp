#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrr/network.hpp"
#include "mrr/tensor.hpp"

namespace mrr {

using Json = nlohmann::json;

inline constexpr int kModelFormatVersion = 1;

Json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const Json& j);
Json doubles_to_json(std::span<const double> values);  // base64 float64 string
std::vector<double> doubles_from_json(const Json& j);

Json network_to_json(const Network& net);
Network network_from_json(const Json& j);

// Canonical text form used for every artifact: sorted keys, two-space indent, trailing newline.
std::string dump_json(const Json& j);
Json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

void save_network(const std::filesystem::path& path, const Network& net);
Network load_network(const std::filesystem::path& path);

}  // namespace mrr
