#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cyclingnet/errors.hpp"
#include "cyclingnet/image.hpp"
#include "cyclingnet/optical_flow.hpp"
#include "cyclingnet/tensor.hpp"

namespace cyclingnet {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw DataError("unknown split tag '" + s + "' (want train|val|test)");
}

/// One clip: a directory of contiguously numbered frame images plus a
/// per-frame 0/1 label (1 = near miss).
struct ClipManifest {
    std::string clip_id;
    std::filesystem::path frame_dir;
    std::size_t frame_count = 0;
    std::vector<int> labels;
    Split split = Split::train;
};

/// Locates frame `idx` of a clip: zero-padded or plain decimal stem with a
/// .ppm or .pgm extension.
inline std::optional<std::filesystem::path> find_frame(const std::filesystem::path& dir,
                                                       std::size_t idx) {
    char padded[16];
    std::snprintf(padded, sizeof padded, "%06zu", idx);
    const std::string plain = std::to_string(idx);
    for (const std::string& stem : {std::string(padded), plain})
        for (const char* ext : {".ppm", ".pgm"}) {
            std::filesystem::path p = dir / (stem + ext);
            if (std::filesystem::exists(p)) return p;
        }
    return std::nullopt;
}

inline std::filesystem::path frame_path(const ClipManifest& clip, std::size_t idx) {
    auto p = find_frame(clip.frame_dir, idx);
    if (!p)
        throw DataError("clip '" + clip.clip_id + "': missing frame " + std::to_string(idx) +
                        " under " + clip.frame_dir.string());
    return *p;
}

namespace detail {

/// Parses a label run-length encoding like "0x6,1x2,0x2" into a label list.
inline std::vector<int> parse_label_rle(const std::string& rle, const std::string& clip_id) {
    std::vector<int> labels;
    std::stringstream ss(rle);
    std::string run;
    while (std::getline(ss, run, ',')) {
        const auto xpos = run.find('x');
        if (xpos == std::string::npos)
            throw DataError("clip '" + clip_id + "': bad label run '" + run +
                            "' (want <value>x<count>)");
        const std::string val = run.substr(0, xpos);
        const std::string cnt = run.substr(xpos + 1);
        if (val != "0" && val != "1")
            throw DataError("clip '" + clip_id + "': label value must be 0 or 1, got '" + val + "'");
        std::size_t count = 0;
        try {
            count = std::stoul(cnt);
        } catch (const std::exception&) {
            throw DataError("clip '" + clip_id + "': bad run count '" + cnt + "'");
        }
        labels.insert(labels.end(), count, val == "1" ? 1 : 0);
    }
    return labels;
}

}  // namespace detail

/// Loads and validates a clip manifest. One clip per line:
///
///   clip_id=<token> dir=<path> frames=<N> labels=<RLE> [split=train|val|test]
///
/// where RLE is comma-separated <value>x<count> runs summing to N. Paths are
/// relative to the manifest's directory. '#' starts a comment; unknown keys
/// are rejected. Frame files 0..N-1 must exist.
inline std::vector<ClipManifest> load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path.string());
    const std::filesystem::path base = path.has_parent_path() ? path.parent_path() : ".";
    std::vector<ClipManifest> clips;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string field;
        std::map<std::string, std::string> kv;
        while (ls >> field) {
            const auto eq = field.find('=');
            if (eq == std::string::npos)
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": expected key=value, got '" + field + "'");
            const std::string key = field.substr(0, eq);
            if (key != "clip_id" && key != "dir" && key != "frames" && key != "labels" &&
                key != "split")
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": unknown field '" + key + "'");
            if (!kv.emplace(key, field.substr(eq + 1)).second)
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": duplicate field '" + key + "'");
        }
        if (kv.empty()) continue;
        for (const char* req : {"clip_id", "dir", "frames", "labels"})
            if (!kv.count(req))
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": missing required field '" + std::string(req) + "'");
        ClipManifest clip;
        clip.clip_id = kv["clip_id"];
        clip.frame_dir = base / kv["dir"];
        try {
            clip.frame_count = std::stoul(kv["frames"]);
        } catch (const std::exception&) {
            throw DataError("clip '" + clip.clip_id + "': bad frame count '" + kv["frames"] + "'");
        }
        clip.labels = detail::parse_label_rle(kv["labels"], clip.clip_id);
        if (clip.labels.size() != clip.frame_count)
            throw DataError("clip '" + clip.clip_id + "': " + std::to_string(clip.labels.size()) +
                            " labels for " + std::to_string(clip.frame_count) + " frames");
        if (kv.count("split")) clip.split = parse_split(kv["split"]);
        for (std::size_t i = 0; i < clip.frame_count; ++i)
            if (!find_frame(clip.frame_dir, i))
                throw DataError("clip '" + clip.clip_id + "': missing frame " + std::to_string(i) +
                                " under " + clip.frame_dir.string());
        clips.push_back(std::move(clip));
    }
    return clips;
}

inline double positive_rate(const std::vector<ClipManifest>& clips) {
    std::size_t total = 0, positive = 0;
    for (const auto& c : clips) {
        total += c.labels.size();
        for (int l : c.labels) positive += l;
    }
    return total == 0 ? 0.0 : static_cast<double>(positive) / static_cast<double>(total);
}

/// Resamples to the target extents with intensities kept in [0, 1].
inline Image resize_frame(const Image& img, int target_h = 240, int target_w = 320) {
    if (img.empty()) throw std::invalid_argument("resize_frame: empty image");
    Image rgb = img;
    if (rgb.channels == 1) {
        Image expanded(rgb.height, rgb.width, 3);
        for (int y = 0; y < rgb.height; ++y)
            for (int x = 0; x < rgb.width; ++x)
                for (int c = 0; c < 3; ++c) expanded.at(y, x, c) = rgb.at(y, x, 0);
        rgb = std::move(expanded);
    }
    return resize_bilinear(rgb, target_h, target_w);
}

/// x = rgb/2 + (flow_t + flow_{t-1} + flow_{t-2} + flow_{t-3})/8, elementwise.
/// All five images must share extents and have 3 channels.
inline Image fuse_images(const Image& rgb, const std::array<const Image*, 4>& flows) {
    for (const Image* f : flows) {
        if (!f) throw std::invalid_argument("fuse_images: null flow image");
        if (f->height != rgb.height || f->width != rgb.width || f->channels != 3 ||
            rgb.channels != 3)
            throw std::invalid_argument("fuse_images: extent/channel mismatch");
    }
    Image out(rgb.height, rgb.width, 3);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = rgb.data[i] * 0.5f +
                      (flows[0]->data[i] + flows[1]->data[i] + flows[2]->data[i] +
                       flows[3]->data[i]) * 0.125f;
    return out;
}

/// One fused composite with its label. frame_index >= 4 always (earlier
/// frames lack four preceding flows and are skipped).
struct FusedSample {
    Tensor<float> x;
    int label = 0;
    std::string clip_id;
    std::size_t frame_index = 0;
};

inline Tensor<float> image_to_tensor(const Image& img) {
    return Tensor<float>(Shape{static_cast<std::size_t>(img.height),
                               static_cast<std::size_t>(img.width),
                               static_cast<std::size_t>(img.channels)},
                         img.data);
}

inline Image tensor_to_image(const Tensor<float>& t) {
    if (t.rank() != 3) throw std::invalid_argument("tensor_to_image: expected rank 3");
    Image img(static_cast<int>(t.extent(0)), static_cast<int>(t.extent(1)),
              static_cast<int>(t.extent(2)));
    img.data = t.values();
    return img;
}

// ----- augmentation -----

inline Image hflip(const Image& img) {
    Image out(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    return out;
}

/// Resamples by `factor` about the image center, then crops (factor > 1) or
/// replicate-pads (factor < 1) back to the original extents. factor == 1 is
/// the identity.
inline Image rescale_center(const Image& img, float factor) {
    if (factor == 1.0f) return img;
    const int sh = std::max(1, static_cast<int>(std::lround(img.height * factor)));
    const int sw = std::max(1, static_cast<int>(std::lround(img.width * factor)));
    const Image scaled = resize_bilinear(img, sh, sw);
    Image out(img.height, img.width, img.channels);
    const int oy = (sh - img.height) / 2;
    const int ox = (sw - img.width) / 2;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const int syy = std::clamp(y + oy, 0, sh - 1);
            const int sxx = std::clamp(x + ox, 0, sw - 1);
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = scaled.at(syy, sxx, c);
        }
    return out;
}

struct AugmentDecision {
    bool flip = false;
    float scale = 1.0f;
};

inline AugmentDecision draw_augment(bool flip_enabled, bool scale_enabled, Rng& rng) {
    AugmentDecision d;
    if (flip_enabled) d.flip = rng.uniform(0.0, 1.0) < 0.5;
    if (scale_enabled) d.scale = static_cast<float>(rng.uniform(0.9, 1.1));
    return d;
}

/// Applies a (deterministic) augmentation decision; the label is unchanged.
inline FusedSample augment(FusedSample sample, const AugmentDecision& d) {
    Image img = tensor_to_image(sample.x);
    if (d.flip) img = hflip(img);
    if (d.scale != 1.0f) img = rescale_center(img, d.scale);
    sample.x = image_to_tensor(img);
    return sample;
}

// ----- flow cache -----

inline std::filesystem::path flow_cache_dir(const std::filesystem::path& cache_root,
                                            const FlowParams& params,
                                            const std::string& clip_id) {
    char tag[32];
    std::snprintf(tag, sizeof tag, "fp%016llx",
                  static_cast<unsigned long long>(params.hash()));
    return cache_root / tag / clip_id;
}

/// Cache entry for the flow from frame (index-1) to frame (index); valid
/// indices are 1..frame_count-1.
inline std::filesystem::path flow_cache_path(const std::filesystem::path& cache_root,
                                             const FlowParams& params, const std::string& clip_id,
                                             std::size_t frame_index) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.cyfl", frame_index);
    return flow_cache_dir(cache_root, params, clip_id) / name;
}

struct FlowCacheStats {
    std::size_t computed = 0;
    std::size_t skipped = 0;
};

/// Computes and caches the N-1 flow fields of a clip (on frames resized to
/// the target extents). Fresh entries are skipped, so reruns are idempotent.
/// Optionally writes colorized flows next to the cache for inspection.
inline FlowCacheStats ensure_flows(const ClipManifest& clip,
                                   const std::filesystem::path& cache_root,
                                   const FlowParams& params, int target_h, int target_w,
                                   bool emit_color = false) {
    FlowCacheStats stats;
    if (clip.frame_count < 2) return stats;
    std::filesystem::create_directories(flow_cache_dir(cache_root, params, clip.clip_id));
    Image prev = resize_frame(read_image(frame_path(clip, 0)), target_h, target_w);
    for (std::size_t t = 1; t < clip.frame_count; ++t) {
        Image next = resize_frame(read_image(frame_path(clip, t)), target_h, target_w);
        const auto path = flow_cache_path(cache_root, params, clip.clip_id, t);
        if (flow_file_fresh(path, target_h, target_w)) {
            ++stats.skipped;
        } else {
            const FlowField flow = estimate_flow(prev, next, params);
            write_flow_file(path, flow);
            ++stats.computed;
            if (emit_color) {
                char name[32];
                std::snprintf(name, sizeof name, "color_%06zu.ppm", t);
                write_image(path.parent_path() / name, flow_to_color(flow));
            }
        }
        prev = std::move(next);
    }
    return stats;
}

// ----- dataset assembly -----

struct SampleRef {
    std::size_t clip = 0;
    std::size_t frame_index = 0;
};

/// Ordered sample lists per split. Only frame indices >= 4 appear (the
/// fusion precondition); splits are disjoint by construction.
struct DatasetSplit {
    std::vector<SampleRef> train, val, test;
    std::size_t batch_size = 64;
};

struct Batch {
    Tensor<float> x;             // (B, H, W, 3)
    std::vector<float> labels;   // length B
    std::vector<SampleRef> refs;
};

struct AugmentConfig {
    bool flip = false;
    bool scale = false;
};

class DatasetBuilder {
public:
    DatasetBuilder(std::vector<ClipManifest> clips, std::filesystem::path cache_root,
                   FlowParams params, int target_h = 240, int target_w = 320,
                   std::size_t batch_size = 64)
        : clips_(std::move(clips)), cache_root_(std::move(cache_root)), params_(params),
          target_h_(target_h), target_w_(target_w) {
        split_.batch_size = batch_size;
        for (std::size_t ci = 0; ci < clips_.size(); ++ci) {
            const ClipManifest& clip = clips_[ci];
            auto& list = clip.split == Split::train ? split_.train
                        : clip.split == Split::val  ? split_.val
                                                    : split_.test;
            for (std::size_t t = 4; t < clip.frame_count; ++t) list.push_back({ci, t});
        }
    }

    const DatasetSplit& split() const { return split_; }
    const std::vector<ClipManifest>& clips() const { return clips_; }
    int target_height() const { return target_h_; }
    int target_width() const { return target_w_; }

    /// Fails with the offending clip and frame index when a referenced flow
    /// is not cached.
    void verify_cache() const {
        for (const auto* list : {&split_.train, &split_.val, &split_.test})
            for (const SampleRef& ref : *list)
                for (std::size_t k = 0; k < 4; ++k) {
                    const auto path = flow_cache_path(cache_root_, params_,
                                                      clips_[ref.clip].clip_id,
                                                      ref.frame_index - k);
                    if (!flow_file_fresh(path, target_h_, target_w_))
                        throw DataError("missing flow cache entry for clip '" +
                                        clips_[ref.clip].clip_id + "' frame " +
                                        std::to_string(ref.frame_index - k) +
                                        " (run the flow command first)");
                }
    }

    FusedSample sample(const SampleRef& ref) const {
        const ClipManifest& clip = clips_[ref.clip];
        const Image rgb =
            resize_frame(read_image(frame_path(clip, ref.frame_index)), target_h_, target_w_);
        std::array<Image, 4> colors;
        std::array<const Image*, 4> ptrs{};
        for (std::size_t k = 0; k < 4; ++k) {
            const FlowField flow = read_flow_file(
                flow_cache_path(cache_root_, params_, clip.clip_id, ref.frame_index - k));
            colors[k] = flow_to_color(flow);
            ptrs[k] = &colors[k];
        }
        FusedSample s;
        s.x = image_to_tensor(fuse_images(rgb, ptrs));
        s.label = clip.labels[ref.frame_index];
        s.clip_id = clip.clip_id;
        s.frame_index = ref.frame_index;
        return s;
    }

    /// Deterministically shuffled copy of the training list.
    std::vector<SampleRef> shuffled_train(std::uint64_t seed) const {
        std::vector<SampleRef> refs = split_.train;
        Rng rng(seed);
        for (std::size_t i = refs.size(); i > 1; --i)
            std::swap(refs[i - 1], refs[rng.next() % i]);
        return refs;
    }

    /// Materializes consecutive batches from an ordered reference list.
    /// Augmentation (training only, per caller) draws from `rng`.
    std::vector<Batch> batches(const std::vector<SampleRef>& refs, std::size_t batch_size,
                               const AugmentConfig* aug = nullptr, Rng* rng = nullptr) const {
        std::vector<Batch> out;
        for (std::size_t start = 0; start < refs.size(); start += batch_size) {
            const std::size_t n = std::min(batch_size, refs.size() - start);
            Batch batch;
            batch.x = Tensor<float>(Shape{n, static_cast<std::size_t>(target_h_),
                                          static_cast<std::size_t>(target_w_), 3});
            const std::size_t stride = batch.x.size() / n;
            for (std::size_t i = 0; i < n; ++i) {
                FusedSample s = sample(refs[start + i]);
                if (aug && rng && (aug->flip || aug->scale))
                    s = augment(std::move(s), draw_augment(aug->flip, aug->scale, *rng));
                std::copy_n(s.x.data(), stride, batch.x.data() + i * stride);
                batch.labels.push_back(static_cast<float>(s.label));
                batch.refs.push_back(refs[start + i]);
            }
            out.push_back(std::move(batch));
        }
        return out;
    }

private:
    std::vector<ClipManifest> clips_;
    std::filesystem::path cache_root_;
    FlowParams params_;
    int target_h_, target_w_;
    DatasetSplit split_;
};

}  // namespace cyclingnet
