#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xdelta/tensor.hpp"

namespace xdelta {

// One annotated region inside an image: a binary pixel mask plus a semantic
// label ("handle", "eye", ...).
struct SegmentAnnotation {
    std::string label;
    std::vector<std::uint8_t> mask;  // H*W, row-major, 0/1
};

struct Box {
    long x = 0, y = 0, w = 0, h = 0;
    bool valid() const { return w > 0 && h > 0; }
};

struct DatasetNorm {
    float mean = 0.5f;
    float stddev = 0.5f;
};

// Images are stored normalized: value = (raw/255 - mean) / stddev.
struct LabeledDataset {
    long height = 0, width = 0, channels = 0;
    DatasetNorm norm;
    std::vector<std::string> class_names;
    std::vector<Tensor> images;  // each {C, H, W}
    std::vector<long> labels;
    std::vector<std::string> ids;
    std::vector<std::vector<SegmentAnnotation>> segments;  // per image, may be empty
    std::vector<Box> boxes;                                // per image, may be invalid

    std::size_t size() const { return images.size(); }
    long class_count() const { return static_cast<long>(class_names.size()); }

    void validate() const {
        for (long l : labels)
            if (l < 0 || l >= class_count()) throw StructuralError("label index out of range");
        for (const auto& segs : segments)
            for (const auto& s : segs)
                if (static_cast<long>(s.mask.size()) != height * width)
                    throw StructuralError("segment mask does not fit image bounds");
        if (labels.size() != images.size()) throw StructuralError("label/image count mismatch");
    }

    LabeledDataset subset(const std::vector<std::size_t>& idx) const {
        LabeledDataset out;
        out.height = height;
        out.width = width;
        out.channels = channels;
        out.norm = norm;
        out.class_names = class_names;
        for (std::size_t i : idx) {
            out.images.push_back(images[i]);
            out.labels.push_back(labels[i]);
            if (i < ids.size()) out.ids.push_back(ids[i]);
            if (i < segments.size()) out.segments.push_back(segments[i]);
            if (i < boxes.size()) out.boxes.push_back(boxes[i]);
        }
        return out;
    }

    LabeledDataset head(std::size_t n) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < std::min(n, size()); ++i) idx.push_back(i);
        return subset(idx);
    }
};

// Assembles a batch tensor {N, C, H, W} from dataset indices.
inline Tensor make_batch(const LabeledDataset& data, const std::vector<std::size_t>& idx) {
    Tensor batch({static_cast<long>(idx.size()), data.channels, data.height, data.width});
    const long stride = data.channels * data.height * data.width;
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(data.images[idx[i]].data(), stride, batch.data() + static_cast<long>(i) * stride);
    return batch;
}

inline Tensor single_image_batch(const LabeledDataset& data, std::size_t i) {
    return make_batch(data, {i});
}

// ---------------------------------------------------------------------------
// PPM (P6) image I/O. The dataset directory convention stores one class per
// subdirectory of 8-bit PPM files.
// ---------------------------------------------------------------------------

inline void write_ppm(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb,
                      long h, long w) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << "P6\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

inline std::vector<std::uint8_t> read_ppm(const std::filesystem::path& path, long& h, long& w) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read " + path.string());
    std::string magic;
    f >> magic;
    if (magic != "P6") throw ConfigError(path.string() + ": not a P6 ppm");
    long maxv = 0;
    f >> w >> h >> maxv;
    if (maxv != 255 || w <= 0 || h <= 0) throw ConfigError(path.string() + ": unsupported ppm");
    f.get();  // single whitespace after header
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(3 * h * w));
    f.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!f) throw ConfigError(path.string() + ": truncated ppm");
    return rgb;
}

// interleaved rgb -> normalized CHW tensor
inline Tensor image_to_tensor(const std::vector<std::uint8_t>& rgb, long h, long w,
                              const DatasetNorm& norm) {
    Tensor t({3, h, w});
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            for (long c = 0; c < 3; ++c) {
                float v = static_cast<float>(rgb[static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0f;
                t[static_cast<std::size_t>((c * h + y) * w + x)] = (v - norm.mean) / norm.stddev;
            }
    return t;
}

inline std::vector<std::uint8_t> tensor_to_image(const Tensor& t, const DatasetNorm& norm) {
    const long h = t.dim(1), w = t.dim(2);
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(3 * h * w));
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            for (long c = 0; c < 3; ++c) {
                float v = t[static_cast<std::size_t>((c * h + y) * w + x)] * norm.stddev + norm.mean;
                v = std::clamp(v * 255.0f + 0.5f, 0.0f, 255.0f);
                rgb[static_cast<std::size_t>((y * w + x) * 3 + c)] = static_cast<std::uint8_t>(v);
            }
    return rgb;
}

// ---------------------------------------------------------------------------
// Annotation sidecar: one JSON object per line, keyed by image id.
// Masks are run-length encoded over the row-major flattened image, runs
// alternating zeros/ones and starting with a zero run.
// ---------------------------------------------------------------------------

inline std::vector<long> rle_encode(const std::vector<std::uint8_t>& mask) {
    std::vector<long> runs;
    long pos = 0;
    std::uint8_t cur = 0;
    long run = 0;
    for (std::uint8_t v : mask) {
        if ((v != 0) == (cur != 0)) {
            ++run;
        } else {
            runs.push_back(run);
            cur = v;
            run = 1;
        }
        ++pos;
    }
    runs.push_back(run);
    return runs;
}

inline std::vector<std::uint8_t> rle_decode(const std::vector<long>& runs, long total) {
    std::vector<std::uint8_t> mask;
    mask.reserve(static_cast<std::size_t>(total));
    std::uint8_t cur = 0;
    for (long r : runs) {
        for (long i = 0; i < r; ++i) mask.push_back(cur);
        cur = cur ? 0 : 1;
    }
    if (static_cast<long>(mask.size()) != total)
        throw StructuralError("rle length does not match image size");
    return mask;
}

inline void write_annotations(const std::filesystem::path& path, const LabeledDataset& data) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data.segments.empty() || (data.segments[i].empty() && !data.boxes[i].valid())) continue;
        nlohmann::json j;
        j["image"] = data.ids[i];
        nlohmann::json segs = nlohmann::json::array();
        for (const auto& s : data.segments[i])
            segs.push_back({{"label", s.label}, {"rle", rle_encode(s.mask)}});
        j["segments"] = segs;
        if (data.boxes[i].valid())
            j["box"] = {data.boxes[i].x, data.boxes[i].y, data.boxes[i].w, data.boxes[i].h};
        f << j.dump() << "\n";
    }
}

// Saves dataset as class-named subfolders of ppm files plus the sidecar.
inline void save_dataset(const LabeledDataset& data, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<long> counter(static_cast<std::size_t>(data.class_count()), 0);
    LabeledDataset withIds = data;
    withIds.ids.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        long cls = data.labels[i];
        const std::string& cname = data.class_names[static_cast<std::size_t>(cls)];
        fs::create_directories(dir / cname);
        std::ostringstream name;
        name << "img" << std::setw(5) << std::setfill('0') << counter[static_cast<std::size_t>(cls)]++
             << ".ppm";
        write_ppm(dir / cname / name.str(), tensor_to_image(data.images[i], data.norm), data.height,
                  data.width);
        withIds.ids[i] = cname + "/" + name.str();
    }
    if (!data.segments.empty()) write_annotations(dir / "annotations.jsonl", withIds);
}

// Loads the directory convention. Class order is the sorted subfolder list.
inline LabeledDataset load_dataset(const std::filesystem::path& dir, const DatasetNorm& norm) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw ConfigError("dataset directory missing: " + dir.string());
    LabeledDataset data;
    data.norm = norm;
    std::vector<std::string> classes;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) classes.push_back(e.path().filename().string());
    std::sort(classes.begin(), classes.end());
    data.class_names = classes;
    for (std::size_t cls = 0; cls < classes.size(); ++cls) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(dir / classes[cls]))
            if (e.path().extension() == ".ppm") files.push_back(e.path().filename().string());
        std::sort(files.begin(), files.end());
        for (const auto& fn : files) {
            long h = 0, w = 0;
            auto rgb = read_ppm(dir / classes[cls] / fn, h, w);
            if (data.height == 0) {
                data.height = h;
                data.width = w;
                data.channels = 3;
            } else if (h != data.height || w != data.width) {
                throw StructuralError("mixed image sizes in dataset");
            }
            data.images.push_back(image_to_tensor(rgb, h, w, norm));
            data.labels.push_back(static_cast<long>(cls));
            data.ids.push_back(classes[cls] + "/" + fn);
        }
    }
    data.segments.assign(data.size(), {});
    data.boxes.assign(data.size(), Box{});
    // sidecar
    fs::path side = dir / "annotations.jsonl";
    if (fs::exists(side)) {
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < data.size(); ++i) index[data.ids[i]] = i;
        std::ifstream f(side);
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line);
            auto it = index.find(j.at("image").get<std::string>());
            if (it == index.end()) continue;
            std::size_t i = it->second;
            for (const auto& s : j.value("segments", nlohmann::json::array())) {
                SegmentAnnotation seg;
                seg.label = s.at("label").get<std::string>();
                seg.mask = rle_decode(s.at("rle").get<std::vector<long>>(), data.height * data.width);
                data.segments[i].push_back(std::move(seg));
            }
            if (j.contains("box")) {
                auto b = j["box"].get<std::vector<long>>();
                data.boxes[i] = Box{b[0], b[1], b[2], b[3]};
            }
        }
    }
    data.validate();
    return data;
}

}  // namespace xdelta
