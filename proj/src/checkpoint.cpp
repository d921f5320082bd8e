#include "crtseg/checkpoint.hpp"

#include "crtseg/errors.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace crtseg {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'T', 'S', 'E', 'G', '0', '1'};

template <typename T>
void put_le(std::ostream& out, T v) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
    std::array<unsigned char, sizeof(T)> bytes{};
    in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
}

}  // namespace

const TensorBlob* Container::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void write_container(const std::filesystem::path& path, const Container& container) {
    nlohmann::json header = container.header;
    nlohmann::json table = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& t : container.tensors) {
        table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.data.size()}});
        offset += t.data.size();
    }
    header["tensors"] = table;
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof kMagic);
    put_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : container.tensors)
        for (double v : t.data) put_le<double>(out, v);
    if (!out) throw LoadError("failed writing checkpoint " + path.string());
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw LoadError(path.string() + " is not a checkpoint container");
    const auto len = get_le<std::uint64_t>(in);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw LoadError("truncated checkpoint header in " + path.string());

    Container c;
    try {
        c.header = nlohmann::json::parse(text);
        for (const auto& t : c.header.at("tensors")) {
            TensorBlob blob;
            blob.name = t.at("name").get<std::string>();
            blob.shape = t.at("shape").get<std::vector<std::size_t>>();
            blob.data.resize(t.at("count").get<std::size_t>());
            c.tensors.push_back(std::move(blob));
        }
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("malformed checkpoint header in " + path.string() + ": " + e.what());
    }
    for (auto& t : c.tensors)
        for (double& v : t.data) v = get_le<double>(in);
    if (!in) throw LoadError("truncated checkpoint payload in " + path.string());
    c.header.erase("tensors");
    return c;
}

}  // namespace crtseg
