#include "crtseg/config.hpp"

#include "crtseg/rng.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace crtseg {

using nlohmann::json;

namespace {

struct Problems {
    std::vector<std::string> problems;
    std::vector<std::string> unknown;
};

bool convert(const json& j, bool& out) {
    if (!j.is_boolean()) return false;
    out = j.get<bool>();
    return true;
}
bool convert(const json& j, double& out) {
    if (!j.is_number()) return false;
    out = j.get<double>();
    return true;
}
bool convert(const json& j, std::uint64_t& out) {
    if (j.is_number_unsigned() || (j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
        out = j.get<std::uint64_t>();
        return true;
    }
    return false;
}
bool convert(const json& j, std::string& out) {
    if (!j.is_string()) return false;
    out = j.get<std::string>();
    return true;
}
bool convert(const json& j, std::int32_t& out) {
    if (!j.is_number_integer()) return false;
    out = j.get<std::int32_t>();
    return true;
}
template <class T>
bool convert(const json& j, std::vector<T>& out) {
    if (!j.is_array()) return false;
    std::vector<T> v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i)
        if (!convert(j[i], v[i])) return false;
    out = std::move(v);
    return true;
}

template <class T>
constexpr const char* type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_same_v<T, double>) return "a number";
    else if constexpr (std::is_same_v<T, std::uint64_t>) return "a non-negative integer";
    else if constexpr (std::is_same_v<T, std::int32_t>) return "an integer";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "an array";
}

// Reads known keys of one JSON object; anything left over is reported.
class Reader {
public:
    Reader(const json* obj, std::string path, Problems& p) : obj_(obj), path_(std::move(path)), p_(p) {
        if (obj_ && !obj_->is_object()) {
            p_.problems.push_back(where() + " must be an object");
            obj_ = nullptr;
        }
    }
    Reader(const Reader&) = delete;
    ~Reader() {
        if (!obj_) return;
        for (const auto& [k, v] : obj_->items())
            if (!seen_.count(k)) p_.unknown.push_back(path_.empty() ? k : path_ + "." + k);
    }

    template <class T>
    bool get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!obj_ || !obj_->contains(key)) return false;
        if constexpr (std::is_same_v<T, std::size_t> && !std::is_same_v<std::size_t, std::uint64_t>) {
            std::uint64_t v;
            if (!convert(obj_->at(key), v)) return fail<std::uint64_t>(key);
            out = static_cast<std::size_t>(v);
        } else {
            if (!convert(obj_->at(key), out)) return fail<T>(key);
        }
        return true;
    }

    const json* child(const std::string& key) {
        seen_.insert(key);
        if (!obj_ || !obj_->contains(key)) return nullptr;
        return &obj_->at(key);
    }
    std::string sub(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    template <class T>
    bool fail(const std::string& key) {
        p_.problems.push_back(sub(key) + " must be " + type_name<T>());
        return false;
    }
    std::string where() const { return path_.empty() ? "config" : path_; }

    const json* obj_;
    std::string path_;
    Problems& p_;
    std::set<std::string> seen_;
};

template <class F>
void check(Problems& p, const std::string& section, F&& f) {
    try {
        f();
    } catch (const ValidationError& e) {
        p.problems.push_back(section + ": " + e.what());
    }
}

const char* kind_name(ShapeKind k) { return k == ShapeKind::ellipse ? "ellipse" : "polygon"; }

void read_synthetic(const json* j, const std::string& path, SyntheticSpec& s, Problems& p) {
    Reader r(j, path, p);
    r.get("count", s.count);
    r.get("height", s.height);
    r.get("width", s.width);
    r.get("min_shapes", s.min_shapes);
    r.get("max_shapes", s.max_shapes);
    r.get("radius_min", s.radius_min);
    r.get("radius_max", s.radius_max);
    r.get("background_level", s.background_level);
    r.get("texture_amplitude", s.texture_amplitude);
    r.get("organ_texture", s.organ_texture);
    r.get("noise_sigma", s.noise_sigma);
    if (const json* cls = r.child("classes")) {
        if (!cls->is_array()) {
            p.problems.push_back(r.sub("classes") + " must be an array");
        } else {
            s.classes.clear();
            for (std::size_t i = 0; i < cls->size(); ++i) {
                Reader c(&(*cls)[i], r.sub("classes") + "[" + std::to_string(i) + "]", p);
                SyntheticClass sc;
                c.get("name", sc.name);
                std::string kind = "ellipse";
                c.get("kind", kind);
                if (kind == "ellipse") sc.kind = ShapeKind::ellipse;
                else if (kind == "polygon") sc.kind = ShapeKind::polygon;
                else p.problems.push_back(c.sub("kind") + " must be \"ellipse\" or \"polygon\"");
                c.get("intensity", sc.intensity);
                s.classes.push_back(sc);
            }
        }
    }
}

void read_data(const json* j, const std::string& path, DataSpec& d, Problems& p) {
    Reader r(j, path, p);
    r.get("source", d.source);
    r.get("root", d.root);
    r.get("manifest", d.manifest);
    std::uint64_t seed;
    if (r.get("seed", seed)) d.seed = seed;
    read_synthetic(r.child("synthetic"), r.sub("synthetic"), d.synthetic, p);
    if (d.source != "synthetic" && d.source != "files")
        p.problems.push_back(r.sub("source") + " must be \"synthetic\" or \"files\"");
    if (d.source == "files" && d.manifest.empty())
        p.problems.push_back(r.sub("manifest") + " is required when source is \"files\"");
    if (d.source == "synthetic") check(p, r.sub("synthetic"), [&] { d.synthetic.validate(); });
}

json synthetic_json(const SyntheticSpec& s) {
    json classes = json::array();
    for (const auto& c : s.classes)
        classes.push_back({{"name", c.name}, {"kind", kind_name(c.kind)}, {"intensity", c.intensity}});
    return {{"count", s.count},
            {"height", s.height},
            {"width", s.width},
            {"min_shapes", s.min_shapes},
            {"max_shapes", s.max_shapes},
            {"radius_min", s.radius_min},
            {"radius_max", s.radius_max},
            {"background_level", s.background_level},
            {"texture_amplitude", s.texture_amplitude},
            {"organ_texture", s.organ_texture},
            {"noise_sigma", s.noise_sigma},
            {"classes", classes}};
}

json data_json(const DataSpec& d) {
    json j = {{"source", d.source}, {"root", d.root}, {"manifest", d.manifest}, {"synthetic", synthetic_json(d.synthetic)}};
    if (d.seed) j["seed"] = *d.seed;
    return j;
}

json transforms_json(const TransformRanges& t) {
    return {{"rotation_deg", t.rotation_deg}, {"scale_min", t.scale_min},   {"scale_max", t.scale_max},
            {"shear_deg", t.shear_deg},       {"translation_px", t.translation_px},
            {"gamma_min", t.gamma_min},       {"gamma_max", t.gamma_max}};
}

void read_transforms(const json* j, const std::string& path, TransformRanges& t, Problems& p) {
    Reader r(j, path, p);
    r.get("rotation_deg", t.rotation_deg);
    r.get("scale_min", t.scale_min);
    r.get("scale_max", t.scale_max);
    r.get("shear_deg", t.shear_deg);
    r.get("translation_px", t.translation_px);
    r.get("gamma_min", t.gamma_min);
    r.get("gamma_max", t.gamma_max);
    check(p, path, [&] { t.validate(); });
}

}  // namespace

RunConfig::RunConfig() {
    eval_data.synthetic.count = 64;
    apply_seed(0);
}

void RunConfig::apply_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    train.encoder.seed = derive_seed(s, 0xE1C0);
    train.attention.seed = derive_seed(s, 0xA77E);
    eval.seed = derive_seed(s, 0xE7A1);
}

ConfigError::ConfigError(std::vector<std::string> problems, std::vector<std::string> unknown_keys)
    : Error([&] {
          std::string msg = "invalid configuration:";
          for (const auto& k : unknown_keys) msg += "\n  unknown key '" + k + "'";
          for (const auto& pr : problems) msg += "\n  " + pr;
          return msg;
      }()),
      problems_(std::move(problems)),
      unknown_(std::move(unknown_keys)) {}

json ConfigError::to_json() const {
    return {{"error", "config"}, {"unknown_keys", unknown_}, {"problems", problems_}};
}

RunConfig parse_config(const json& j) {
    Problems p;
    RunConfig c;
    {
        Reader r(&j, "", p);
        std::uint64_t seed = 0;
        if (r.get("seed", seed)) c.apply_seed(seed);
        read_data(r.child("data"), "data", c.data, p);
        read_data(r.child("eval_data"), "eval_data", c.eval_data, p);

        TrainConfig& t = c.train;
        {
            Reader s(r.child("superpixel"), "superpixel", p);
            s.get("k", t.superpixel.k);
            s.get("min_size", t.superpixel.min_size);
            s.get("sigma", t.superpixel.sigma);
            s.get("min_area", t.superpixel.min_area);
            s.get("max_area_fraction", t.superpixel.max_area_fraction);
            check(p, "superpixel", [&] { t.superpixel.validate(); });
        }
        read_transforms(r.child("transforms"), "transforms", t.transforms, p);
        {
            Reader e(r.child("encoder"), "encoder", p);
            e.get("architecture", t.encoder.architecture);
            e.get("channels", t.encoder.channels);
            e.get("stride", t.encoder.stride);
            e.get("seed", t.encoder.seed);
            e.get("weights_path", t.encoder.weights_path);
            check(p, "encoder", [&] { t.encoder.validate(); });
        }
        {
            Reader a(r.child("attention"), "attention", p);
            a.get("dim", t.attention.dim);
            a.get("heads", t.attention.heads);
            a.get("seed", t.attention.seed);
            a.get("tie_directions", t.attention.tie_directions);
            check(p, "attention", [&] { t.attention.validate(); });
        }
        {
            Reader a(r.child("alp"), "alp", p);
            a.get("window_h", t.alp.window_h);
            a.get("window_w", t.alp.window_w);
            a.get("fg_threshold", t.alp.fg_threshold);
            a.get("alpha", t.alp.alpha);
            check(p, "alp", [&] { t.alp.validate(); });
        }
        {
            Reader tr(r.child("train"), "train", p);
            tr.get("iterations", t.iterations);
            tr.get("lr0", t.schedule.lr0);
            tr.get("lr_decay", t.schedule.decay);
            tr.get("decay_every", t.schedule.decay_every);
            tr.get("batch_size", t.batch_size);
            tr.get("lambda", t.lambda);
            tr.get("log_every", t.log_every);
            tr.get("use_support_mask", t.flags.use_support_mask);
            tr.get("use_cross_reference", t.flags.use_cross_reference);
            {
                Reader a(tr.child("adam"), "train.adam", p);
                a.get("beta1", t.adam.beta1);
                a.get("beta2", t.adam.beta2);
                a.get("eps", t.adam.eps);
            }
            check(p, "train", [&] { t.validate(); });
        }
        {
            Reader e(r.child("eval"), "eval", p);
            EvalOptions& ev = c.eval;
            e.get("protocol", ev.protocol);
            e.get("folds", ev.folds);
            e.get("fold", ev.fold);
            e.get("classes", ev.classes);
            e.get("exclude", ev.exclude);
            e.get("max_episodes", ev.max_episodes);
            e.get("seed", ev.seed);
            read_transforms(e.child("transforms"), "eval.transforms", ev.transforms, p);
            check(p, "eval", [&] { ev.validate(); });
        }
        {
            Reader g(r.child("gradcheck"), "gradcheck", p);
            GradcheckOptions& go = c.gradcheck;
            g.get("components", go.components);
            g.get("instances", go.instances);
            g.get("epsilon", go.epsilon);
            g.get("tolerance", go.tolerance);
            if (!(go.epsilon > 0.0)) p.problems.push_back("gradcheck.epsilon must be positive");
            if (go.instances == 0) p.problems.push_back("gradcheck.instances must be positive");
        }
    }
    if (!p.problems.empty() || !p.unknown.empty()) throw ConfigError(std::move(p.problems), std::move(p.unknown));
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError({"config " + path.string() + " is not valid JSON: " + e.what()}, {});
    }
    return parse_config(j);
}

json to_json(const TrainConfig& t) {
    return {{"iterations", t.iterations},
            {"lr0", t.schedule.lr0},
            {"lr_decay", t.schedule.decay},
            {"decay_every", t.schedule.decay_every},
            {"batch_size", t.batch_size},
            {"lambda", t.lambda},
            {"log_every", t.log_every},
            {"use_support_mask", t.flags.use_support_mask},
            {"use_cross_reference", t.flags.use_cross_reference},
            {"seed", t.seed},
            {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}},
            {"encoder",
             {{"architecture", t.encoder.architecture},
              {"channels", t.encoder.channels},
              {"stride", t.encoder.stride},
              {"seed", t.encoder.seed},
              {"weights_path", t.encoder.weights_path}}},
            {"attention",
             {{"dim", t.attention.dim},
              {"heads", t.attention.heads},
              {"seed", t.attention.seed},
              {"tie_directions", t.attention.tie_directions}}},
            {"alp",
             {{"window_h", t.alp.window_h},
              {"window_w", t.alp.window_w},
              {"fg_threshold", t.alp.fg_threshold},
              {"alpha", t.alp.alpha}}},
            {"superpixel",
             {{"k", t.superpixel.k},
              {"min_size", t.superpixel.min_size},
              {"sigma", t.superpixel.sigma},
              {"min_area", t.superpixel.min_area},
              {"max_area_fraction", t.superpixel.max_area_fraction}}},
            {"transforms", transforms_json(t.transforms)}};
}

json to_json(const RunConfig& c) {
    const json t = to_json(c.train);
    json train = {{"iterations", t["iterations"]},           {"lr0", t["lr0"]},
                  {"lr_decay", t["lr_decay"]},               {"decay_every", t["decay_every"]},
                  {"batch_size", t["batch_size"]},           {"lambda", t["lambda"]},
                  {"log_every", t["log_every"]},             {"use_support_mask", t["use_support_mask"]},
                  {"use_cross_reference", t["use_cross_reference"]}, {"adam", t["adam"]}};
    return {{"seed", c.seed},
            {"data", data_json(c.data)},
            {"eval_data", data_json(c.eval_data)},
            {"superpixel", t["superpixel"]},
            {"transforms", t["transforms"]},
            {"encoder", t["encoder"]},
            {"attention", t["attention"]},
            {"alp", t["alp"]},
            {"train", train},
            {"eval",
             {{"protocol", c.eval.protocol},
              {"folds", c.eval.folds},
              {"fold", c.eval.fold},
              {"classes", c.eval.classes},
              {"exclude", c.eval.exclude},
              {"max_episodes", c.eval.max_episodes},
              {"seed", c.eval.seed},
              {"transforms", transforms_json(c.eval.transforms)}}},
            {"gradcheck",
             {{"components", c.gradcheck.components},
              {"instances", c.gradcheck.instances},
              {"epsilon", c.gradcheck.epsilon},
              {"tolerance", c.gradcheck.tolerance}}}};
}

std::string config_hash(const json& resolved) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : resolved.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string model_hash(const TrainConfig& c) {
    const json t = to_json(c);
    json key = {{"encoder", t["encoder"]}, {"attention", t["attention"]}, {"alp", t["alp"]},
                {"use_support_mask", c.flags.use_support_mask}, {"use_cross_reference", c.flags.use_cross_reference}};
    key["encoder"].erase("seed");
    key["encoder"].erase("weights_path");
    key["attention"].erase("seed");
    return config_hash(key);
}

SliceDataset training_dataset(const RunConfig& c) { return materialize_dataset(c.data, derive_seed(c.seed, 0xDA7A)); }

SliceDataset evaluation_dataset(const RunConfig& c) {
    return materialize_dataset(c.eval_data, derive_seed(c.seed, 0xDA7B));
}

SliceDataset materialize_dataset(const DataSpec& spec, std::uint64_t default_seed) {
    if (spec.source == "files") return load_slice_dataset(spec.root, spec.manifest);
    return make_synthetic_dataset(spec.synthetic, spec.seed.value_or(default_seed));
}

}  // namespace crtseg
