#pragma once

// Binary tensor container:
//   8 bytes   magic "CRTSEG01"
//   8 bytes   little-endian u64 header length L
//   L bytes   UTF-8 JSON header; "tensors" lists {name, shape, offset, count}
//   payload   little-endian f64 values, offsets counted in values

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace crtseg {

struct TensorBlob {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

struct Container {
    nlohmann::json header = nlohmann::json::object();
    std::vector<TensorBlob> tensors;

    const TensorBlob* find(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

}  // namespace crtseg
