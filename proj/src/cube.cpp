#include "spectraseg/cube.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace spectraseg {

using nlohmann::json;

const char* modality_name(Modality m) {
    switch (m) {
    case Modality::HSI: return "HSI";
    case Modality::TPI: return "TPI";
    case Modality::RGB: return "RGB";
    }
    return "HSI";
}

Modality modality_from_name(const std::string& name) {
    if (name == "HSI") return Modality::HSI;
    if (name == "TPI") return Modality::TPI;
    if (name == "RGB") return Modality::RGB;
    throw ConfigError("unknown modality: " + name);
}

Datacube::Datacube(int w, int h, int c, Modality m)
    : width(w), height(h), channels(c), modality(m),
      wavelengths(static_cast<size_t>(c), 0.0f),
      data(static_cast<size_t>(w) * h * c, 0.0f) {}

void Datacube::validate() const {
    if (width <= 0 || height <= 0 || channels <= 0)
        throw ConfigError("datacube has non-positive dimensions");
    if (data.size() != static_cast<size_t>(width) * height * channels)
        throw ConfigError("datacube payload size does not match dimensions");
    if (wavelengths.size() != static_cast<size_t>(channels))
        throw ConfigError("wavelength axis length does not match channel count");
    if (modality == Modality::RGB && channels != kRgbChannels)
        throw ConfigError("RGB cube must have 3 channels");
    if (modality == Modality::TPI && channels != kTpiChannels)
        throw ConfigError("TPI cube must have 4 channels");
    if (modality == Modality::HSI) {
        for (size_t i = 0; i < wavelengths.size(); ++i) {
            if (wavelengths[i] < 500.0f || wavelengths[i] > 1000.0f)
                throw ConfigError("HSI wavelength outside [500, 1000] nm");
            if (i > 0 && wavelengths[i] <= wavelengths[i - 1])
                throw ConfigError("HSI wavelengths must be strictly increasing");
        }
    }
    for (float v : data) {
        if (!std::isfinite(v) || v < 0.0f)
            throw ConfigError("datacube values must be finite and non-negative");
    }
}

void LabelMap::validate(int num_classes) const {
    if (width <= 0 || height <= 0)
        throw ConfigError("label map has non-positive dimensions");
    if (labels.size() != static_cast<size_t>(width) * height)
        throw ConfigError("label payload size does not match dimensions");
    for (uint8_t l : labels) {
        if (l != kIgnoreLabel && l >= num_classes)
            throw ConfigError("label id out of range: " + std::to_string(l));
    }
}

void ClassTable::validate() const {
    std::set<std::string> names;
    for (size_t i = 0; i < classes.size(); ++i) {
        if (classes[i].id != static_cast<int>(i))
            throw ConfigError("class ids must be contiguous from 0");
        if (!names.insert(classes[i].name).second)
            throw ConfigError("duplicate class name: " + classes[i].name);
    }
}

const std::string& ImageRecord::cube_path(Modality m) const {
    switch (m) {
    case Modality::HSI: return hsi_path;
    case Modality::TPI: return tpi_path;
    case Modality::RGB: return rgb_path;
    }
    return hsi_path;
}

size_t DatasetIndex::image_count() const {
    size_t n = 0;
    for (const auto& s : subjects) n += s.images.size();
    return n;
}

const SubjectRecord* DatasetIndex::find_subject(const std::string& id) const {
    for (const auto& s : subjects)
        if (s.id == id) return &s;
    return nullptr;
}

void DatasetIndex::validate() const {
    classes.validate();
    std::set<std::string> ids;
    for (const auto& s : subjects) {
        if (!ids.insert(s.id).second)
            throw ConfigError("duplicate subject id: " + s.id);
        for (const auto& img : s.images) {
            for (const std::string* p : {&img.hsi_path, &img.tpi_path, &img.rgb_path}) {
                if (p->empty()) continue;
                Datacube cube = read_cube(resolve(*p));
                cube.validate();
            }
            LabelMap lm = read_labels(resolve(img.label_path));
            lm.validate(classes.size());
        }
    }
}

// --- low-level helpers ------------------------------------------------------

namespace {

json read_header_line(std::istream& in, const std::filesystem::path& path) {
    std::string line;
    if (!std::getline(in, line))
        throw IoError(IoError::Kind::MalformedHeader, "missing header line in " + path.string());
    json h = json::parse(line, nullptr, false);
    if (h.is_discarded() || !h.is_object())
        throw IoError(IoError::Kind::MalformedHeader, "header is not a JSON object in " + path.string());
    return h;
}

int header_int(const json& h, const char* key, const std::filesystem::path& path) {
    if (!h.contains(key) || !h[key].is_number_integer())
        throw IoError(IoError::Kind::MalformedHeader,
                      std::string("header misses integer field '") + key + "' in " + path.string());
    return h[key].get<int>();
}

void read_payload(std::istream& in, char* dst, size_t bytes, const std::filesystem::path& path) {
    in.read(dst, static_cast<std::streamsize>(bytes));
    if (static_cast<size_t>(in.gcount()) != bytes)
        throw IoError(IoError::Kind::TruncatedPayload,
                      "payload truncated in " + path.string() + ": expected " + std::to_string(bytes) +
                          " bytes, got " + std::to_string(in.gcount()));
    // trailing bytes mean the header lied about the dimensions
    char probe;
    if (in.read(&probe, 1); in.gcount() != 0)
        throw IoError(IoError::Kind::TruncatedPayload,
                      "payload longer than header dimensions in " + path.string());
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError(IoError::Kind::MissingFile, "cannot open for writing: " + path.string());
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError(IoError::Kind::MissingFile, "cannot open for reading: " + path.string());
    return in;
}

} // namespace

void write_cube(const Datacube& cube, const std::filesystem::path& path) {
    auto out = open_out(path);
    json h = {
        {"width", cube.width},
        {"height", cube.height},
        {"channels", cube.channels},
        {"modality", modality_name(cube.modality)},
        {"wavelengths", cube.wavelengths},
    };
    out << h.dump() << '\n';
    out.write(reinterpret_cast<const char*>(cube.data.data()),
              static_cast<std::streamsize>(cube.data.size() * sizeof(float)));
    if (!out)
        throw IoError(IoError::Kind::MissingFile, "write failed: " + path.string());
}

Datacube read_cube(const std::filesystem::path& path) {
    auto in = open_in(path);
    json h = read_header_line(in, path);
    Datacube cube;
    cube.width = header_int(h, "width", path);
    cube.height = header_int(h, "height", path);
    cube.channels = header_int(h, "channels", path);
    if (!h.contains("modality") || !h["modality"].is_string())
        throw IoError(IoError::Kind::MalformedHeader, "header misses 'modality' in " + path.string());
    cube.modality = modality_from_name(h["modality"].get<std::string>());
    if (!h.contains("wavelengths") || !h["wavelengths"].is_array())
        throw IoError(IoError::Kind::MalformedHeader, "header misses 'wavelengths' in " + path.string());
    cube.wavelengths = h["wavelengths"].get<std::vector<float>>();

    if (cube.width <= 0 || cube.height <= 0 || cube.channels <= 0)
        throw IoError(IoError::Kind::DimensionMismatch, "non-positive dimensions in " + path.string());
    if (cube.wavelengths.size() != static_cast<size_t>(cube.channels))
        throw IoError(IoError::Kind::DimensionMismatch,
                      "wavelength count does not match channels in " + path.string());
    if (cube.modality == Modality::RGB && cube.channels != kRgbChannels)
        throw IoError(IoError::Kind::DimensionMismatch, "RGB cube without 3 channels in " + path.string());
    if (cube.modality == Modality::TPI && cube.channels != kTpiChannels)
        throw IoError(IoError::Kind::DimensionMismatch, "TPI cube without 4 channels in " + path.string());

    size_t n = static_cast<size_t>(cube.width) * cube.height * cube.channels;
    cube.data.resize(n);
    read_payload(in, reinterpret_cast<char*>(cube.data.data()), n * sizeof(float), path);
    return cube;
}

namespace {

void write_map_header(std::ostream& out, int width, int height, const char* dtype) {
    json h = {{"width", width}, {"height", height}, {"dtype", dtype}};
    out << h.dump() << '\n';
}

std::pair<json, std::string> read_map_header(std::istream& in, const std::filesystem::path& path) {
    json h = read_header_line(in, path);
    if (!h.contains("dtype") || !h["dtype"].is_string())
        throw IoError(IoError::Kind::MalformedHeader, "map header misses 'dtype' in " + path.string());
    return {h, h["dtype"].get<std::string>()};
}

} // namespace

void write_labels(const LabelMap& map, const std::filesystem::path& path) {
    auto out = open_out(path);
    write_map_header(out, map.width, map.height, "uint8");
    out.write(reinterpret_cast<const char*>(map.labels.data()),
              static_cast<std::streamsize>(map.labels.size()));
    if (!out)
        throw IoError(IoError::Kind::MissingFile, "write failed: " + path.string());
}

LabelMap read_labels(const std::filesystem::path& path) {
    auto in = open_in(path);
    auto [h, dtype] = read_map_header(in, path);
    if (dtype != "uint8")
        throw IoError(IoError::Kind::MalformedHeader, "expected uint8 map in " + path.string());
    LabelMap map;
    map.width = header_int(h, "width", path);
    map.height = header_int(h, "height", path);
    if (map.width <= 0 || map.height <= 0)
        throw IoError(IoError::Kind::DimensionMismatch, "non-positive dimensions in " + path.string());
    size_t n = static_cast<size_t>(map.width) * map.height;
    map.labels.resize(n);
    read_payload(in, reinterpret_cast<char*>(map.labels.data()), n, path);
    return map;
}

void write_segment_map(const SegmentMap& map, const std::filesystem::path& path) {
    auto out = open_out(path);
    write_map_header(out, map.width, map.height, "int32");
    out.write(reinterpret_cast<const char*>(map.ids.data()),
              static_cast<std::streamsize>(map.ids.size() * sizeof(int32_t)));
    if (!out)
        throw IoError(IoError::Kind::MissingFile, "write failed: " + path.string());
}

SegmentMap read_segment_map(const std::filesystem::path& path) {
    auto in = open_in(path);
    auto [h, dtype] = read_map_header(in, path);
    if (dtype != "int32")
        throw IoError(IoError::Kind::MalformedHeader, "expected int32 map in " + path.string());
    SegmentMap map;
    map.width = header_int(h, "width", path);
    map.height = header_int(h, "height", path);
    if (map.width <= 0 || map.height <= 0)
        throw IoError(IoError::Kind::DimensionMismatch, "non-positive dimensions in " + path.string());
    size_t n = static_cast<size_t>(map.width) * map.height;
    map.ids.resize(n);
    read_payload(in, reinterpret_cast<char*>(map.ids.data()), n * sizeof(int32_t), path);
    return map;
}

void write_index(const DatasetIndex& index, const std::filesystem::path& path) {
    json j;
    j["classes"] = json::array();
    for (const auto& c : index.classes.classes)
        j["classes"].push_back({{"id", c.id}, {"name", c.name}, {"color", c.color}});
    j["subjects"] = json::array();
    for (const auto& s : index.subjects) {
        json imgs = json::array();
        for (const auto& img : s.images) {
            imgs.push_back({{"name", img.name},
                            {"hsi", img.hsi_path},
                            {"tpi", img.tpi_path},
                            {"rgb", img.rgb_path},
                            {"labels", img.label_path}});
        }
        j["subjects"].push_back({{"id", s.id}, {"images", imgs}});
    }
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

DatasetIndex read_index(const std::filesystem::path& path) {
    auto in = open_in(path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw IoError(IoError::Kind::MalformedHeader, "index is not a JSON object: " + path.string());
    DatasetIndex index;
    index.root = path.parent_path();
    for (const auto& c : j.value("classes", json::array())) {
        ClassInfo info;
        info.id = c.at("id").get<int>();
        info.name = c.at("name").get<std::string>();
        auto col = c.value("color", std::vector<int>{0, 0, 0});
        for (int i = 0; i < 3 && i < static_cast<int>(col.size()); ++i)
            info.color[i] = static_cast<uint8_t>(col[i]);
        index.classes.classes.push_back(std::move(info));
    }
    for (const auto& s : j.value("subjects", json::array())) {
        SubjectRecord rec;
        rec.id = s.at("id").get<std::string>();
        for (const auto& img : s.value("images", json::array())) {
            ImageRecord r;
            r.name = img.at("name").get<std::string>();
            r.hsi_path = img.value("hsi", "");
            r.tpi_path = img.value("tpi", "");
            r.rgb_path = img.value("rgb", "");
            r.label_path = img.at("labels").get<std::string>();
            rec.images.push_back(std::move(r));
        }
        index.subjects.push_back(std::move(rec));
    }
    return index;
}

std::vector<int64_t> class_pixel_counts(const DatasetIndex& index,
                                        const std::vector<std::string>& subject_ids) {
    if (subject_ids.empty())
        throw ConfigError("class_pixel_counts: empty split");
    std::vector<int64_t> counts(index.classes.size(), 0);
    for (const auto& id : subject_ids) {
        const SubjectRecord* s = index.find_subject(id);
        if (!s)
            throw ConfigError("unknown subject id: " + id);
        for (const auto& img : s->images) {
            LabelMap lm = read_labels(index.resolve(img.label_path));
            for (uint8_t l : lm.labels) {
                if (l == kIgnoreLabel) continue;
                if (l >= counts.size())
                    throw ConfigError("label id out of range in " + img.label_path);
                ++counts[l];
            }
        }
    }
    return counts;
}

} // namespace spectraseg
