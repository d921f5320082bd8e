#include "crtseg/data.hpp"

#include "crtseg/errors.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace crtseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
    return v;
}

fs::path sidecar(const fs::path& p) { return fs::path(p.string() + ".json"); }

void write_sidecar(const fs::path& path, std::size_t h, std::size_t w, const char* dtype) {
    std::ofstream js(sidecar(path));
    if (!js) throw LoadError("cannot write raster sidecar " + sidecar(path).string());
    js << json{{"height", h}, {"width", w}, {"dtype", dtype}}.dump() << '\n';
}

struct Header {
    std::size_t height, width;
    std::string dtype;
};

Header read_sidecar(const fs::path& path) {
    std::ifstream js(sidecar(path));
    if (!js) throw LoadError("missing raster sidecar " + sidecar(path).string());
    json j;
    try {
        js >> j;
        return {j.at("height").get<std::size_t>(), j.at("width").get<std::size_t>(),
                j.at("dtype").get<std::string>()};
    } catch (const json::exception& e) {
        throw LoadError("malformed raster sidecar " + sidecar(path).string() + ": " + e.what());
    }
}

template <typename T>
std::vector<T> read_payload(const fs::path& path, std::size_t count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("missing raster file " + path.string());
    std::vector<T> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (in.gcount() != static_cast<std::streamsize>(count * sizeof(T)))
        throw LoadError("raster file " + path.string() + " is shorter than its sidecar declares");
    for (auto& v : buf) v = to_little(v);
    return buf;
}

template <typename T>
void write_payload(const fs::path& path, const std::vector<T>& values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write raster file " + path.string());
    for (T v : values) {
        const T le = to_little(v);
        out.write(reinterpret_cast<const char*>(&le), sizeof(T));
    }
}

}  // namespace

void write_raster(const fs::path& path, const Image2D& image) {
    std::vector<float> vals(image.data.begin(), image.data.end());
    write_payload(path, vals);
    write_sidecar(path, image.height, image.width, "f32");
}

void write_raster(const fs::path& path, const MaskMap& mask) {
    write_payload(path, mask.data);
    write_sidecar(path, mask.height, mask.width, "i32");
}

RawRaster read_raster_f32(const fs::path& path) {
    const Header h = read_sidecar(path);
    if (h.dtype != "f32") throw LoadError("raster " + path.string() + " has dtype " + h.dtype + ", expected f32");
    const auto vals = read_payload<float>(path, h.height * h.width);
    return {h.height, h.width, std::vector<double>(vals.begin(), vals.end())};
}

MaskMap read_mask_i32(const fs::path& path) {
    const Header h = read_sidecar(path);
    if (h.dtype != "i32") throw LoadError("mask " + path.string() + " has dtype " + h.dtype + ", expected i32");
    MaskMap m;
    m.height = h.height;
    m.width = h.width;
    m.data = read_payload<std::int32_t>(path, h.height * h.width);
    return m;
}

SliceDataset load_slice_dataset(const fs::path& root, const fs::path& manifest) {
    const fs::path manifest_path = manifest.is_absolute() ? manifest : root / manifest;
    std::ifstream in(manifest_path);
    if (!in) throw LoadError("cannot open manifest " + manifest_path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw LoadError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    if (!j.is_array()) throw LoadError("manifest " + manifest_path.string() + " must be a JSON list");

    SliceDataset ds;
    ds.source = manifest_path.string();
    std::int32_t max_label = 0;
    for (const auto& entry : j) {
        Slice s;
        std::string image_rel;
        try {
            s.id = entry.at("id").get<std::string>();
            image_rel = entry.at("image").get<std::string>();
        } catch (const json::exception& e) {
            throw LoadError("manifest entry is missing 'id' or 'image': " + std::string(e.what()));
        }
        try {
            const RawRaster raw = read_raster_f32(root / image_rel);
            s.image = normalize_intensity(raw.data, raw.height, raw.width);
            if (entry.contains("mask") && !entry.at("mask").is_null()) {
                s.mask = read_mask_i32(root / entry.at("mask").get<std::string>());
                for (auto v : s.mask->data) max_label = std::max(max_label, v);
            }
        } catch (const LoadError& e) {
            throw LoadError("entry '" + s.id + "': " + e.what());
        }
        ds.slices.push_back(std::move(s));
    }
    ds.class_names.push_back("background");
    for (std::int32_t c = 1; c <= max_label; ++c) ds.class_names.push_back("class_" + std::to_string(c));
    ds.validate();
    return ds;
}

void save_slice_dataset(const SliceDataset& dataset, const fs::path& dir) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    json manifest = json::array();
    for (const auto& s : dataset.slices) {
        const std::string img = "images/" + s.id + ".f32";
        write_raster(dir / img, s.image);
        json entry{{"id", s.id}, {"image", img}, {"mask", nullptr}};
        if (s.mask) {
            const std::string msk = "masks/" + s.id + ".i32";
            write_raster(dir / msk, *s.mask);
            entry["mask"] = msk;
        }
        manifest.push_back(std::move(entry));
    }
    std::ofstream out(dir / "manifest.json");
    if (!out) throw LoadError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
    std::ofstream classes(dir / "classes.json");
    classes << json(dataset.class_names).dump(2) << '\n';
}

}  // namespace crtseg
