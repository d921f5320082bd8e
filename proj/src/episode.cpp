#include "crtseg/episode.hpp"

#include "crtseg/errors.hpp"
#include "crtseg/rng.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>

namespace crtseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t pseudolabel_seed(std::uint64_t episode_seed) { return derive_seed(episode_seed, 1); }
std::uint64_t transform_seed(std::uint64_t episode_seed) { return derive_seed(episode_seed, 2); }

Episode build_episode(const Image2D& slice, const SuperpixelMap& superpixels,
                      const SuperpixelConfig& spx_config, const TransformRanges& ranges,
                      std::uint64_t episode_seed) {
    if (superpixels.height != slice.height || superpixels.width != slice.width)
        throw ValidationError("build_episode: superpixel map does not match the slice shape");
    Episode ep;
    ep.episode_seed = episode_seed;
    ep.support_image = slice;
    ep.support_mask = sample_pseudolabel(superpixels, pseudolabel_seed(episode_seed),
                                         spx_config.min_area, spx_config.max_area_fraction);
    ep.params = sample_transform(ranges, slice.height, slice.width, transform_seed(episode_seed));
    ep.query_image = apply_gamma(apply_affine(slice, ep.params, Interp::bilinear), ep.params.gamma);
    ep.query_mask = apply_affine(ep.support_mask, ep.params, Interp::nearest);
    return ep;
}

Episode build_episode(const Image2D& slice, const SuperpixelConfig& spx_config,
                      const TransformRanges& ranges, std::uint64_t episode_seed) {
    spx_config.validate();
    return build_episode(slice, felzenszwalb_segment(slice, spx_config), spx_config, ranges,
                         episode_seed);
}

MaskMap binarize(const MaskMap& mask, std::int32_t class_id) {
    MaskMap out(mask.height, mask.width, 0);
    for (std::size_t i = 0; i < mask.data.size(); ++i) out.data[i] = mask.data[i] == class_id ? 1 : 0;
    return out;
}

Episode build_eval_episode(const Image2D& support_image, const MaskMap& support_mask,
                           const Image2D& query_image, const MaskMap& query_mask,
                           std::int32_t class_id) {
    if (support_mask.height != support_image.height || support_mask.width != support_image.width ||
        query_mask.height != query_image.height || query_mask.width != query_image.width)
        throw ValidationError("build_eval_episode: mask and image shapes differ");
    if (support_image.height != query_image.height || support_image.width != query_image.width)
        throw ValidationError("build_eval_episode: support and query shapes differ");
    if (support_mask.count(class_id) == 0)
        throw ValidationError("build_eval_episode: class " + std::to_string(class_id) +
                              " is absent from the support mask");
    Episode ep;
    ep.class_id = class_id;
    ep.support_image = support_image;
    ep.support_mask = binarize(support_mask, class_id);
    ep.query_image = query_image;
    ep.query_mask = binarize(query_mask, class_id);
    return ep;
}

void export_episodes(const fs::path& dir, std::span<const Episode> episodes) {
    fs::create_directories(dir);
    json list = json::array();
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        const Episode& ep = episodes[i];
        char name[32];
        std::snprintf(name, sizeof name, "episode_%04zu", i);
        const fs::path sub = dir / name;
        fs::create_directories(sub);
        write_raster(sub / "support_image.f32", ep.support_image);
        write_raster(sub / "support_mask.i32", ep.support_mask);
        write_raster(sub / "query_image.f32", ep.query_image);
        write_raster(sub / "query_mask.i32", ep.query_mask);
        list.push_back({{"dir", name},
                        {"episode_seed", ep.episode_seed},
                        {"class_id", ep.class_id},
                        {"support_id", ep.support_id},
                        {"query_id", ep.query_id},
                        {"affine", ep.params.affine},
                        {"gamma", ep.params.gamma},
                        {"transform_seed", ep.params.seed}});
    }
    std::ofstream out(dir / "episodes.json");
    if (!out) throw LoadError("cannot write " + (dir / "episodes.json").string());
    out << list.dump(2) << '\n';
}

std::vector<Episode> import_episodes(const fs::path& dir) {
    std::ifstream in(dir / "episodes.json");
    if (!in) throw LoadError("missing episode manifest " + (dir / "episodes.json").string());
    json list;
    try {
        in >> list;
    } catch (const json::exception& e) {
        throw LoadError("malformed episode manifest: " + std::string(e.what()));
    }
    std::vector<Episode> out;
    for (const auto& j : list) {
        Episode ep;
        try {
            const fs::path sub = dir / j.at("dir").get<std::string>();
            auto load_image = [](const fs::path& p) {
                const RawRaster r = read_raster_f32(p);
                Image2D img(r.height, r.width);
                img.data = r.data;
                return img;
            };
            ep.support_image = load_image(sub / "support_image.f32");
            ep.support_mask = read_mask_i32(sub / "support_mask.i32");
            ep.query_image = load_image(sub / "query_image.f32");
            ep.query_mask = read_mask_i32(sub / "query_mask.i32");
            ep.episode_seed = j.at("episode_seed").get<std::uint64_t>();
            ep.class_id = j.at("class_id").get<std::int32_t>();
            ep.support_id = j.value("support_id", "");
            ep.query_id = j.value("query_id", "");
            ep.params.affine = j.at("affine").get<std::array<double, 6>>();
            ep.params.gamma = j.at("gamma").get<double>();
            ep.params.seed = j.at("transform_seed").get<std::uint64_t>();
        } catch (const json::exception& e) {
            throw LoadError("malformed episode entry: " + std::string(e.what()));
        }
        out.push_back(std::move(ep));
    }
    return out;
}

}  // namespace crtseg
