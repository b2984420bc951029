// Dataset contracts: sequence containers, attribute label derivation, and
// the on-disk formats.
//
// Formats (all integers little-endian):
//  * Silhouette file: magic "CGSL", u16 version=1, u32 T, u32 H, u32 W,
//    then T*H*W bytes, each 0 or 255.
//  * Pose/shape file: magic "CGSM", u16 version=1, u32 T, u32 D=82, then
//    T*D float32 values.
//  * Manifest: CSV with header
//    subject_id,sequence_path,smpl_path,split,age,sex,height_in,weight_lb,bmi,view_tag,range_tag
//    where paths are relative to the manifest's directory.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "combogait/io.hpp"

namespace combogait {

// ---------------------------------------------------------------------------
// Containers and labels
// ---------------------------------------------------------------------------

struct SilhouetteSequence {
    int64_t frames = 0;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<uint8_t> mask;  // frames*height*width values in {0, 1}
};

struct SmplSequence {
    int64_t frames = 0;
    std::vector<float> values;  // frames * 82
};

enum class Sex { female = 0, male = 1 };

inline std::string sex_name(Sex s) { return s == Sex::female ? "female" : "male"; }

inline Sex sex_from_name(const std::string& s) {
    if (s == "female") return Sex::female;
    if (s == "male") return Sex::male;
    throw ValidationError("sex must be 'female' or 'male', got '" + s + "'");
}

struct SubjectMeta {
    std::string subject_id;
    double age = 0.0;        // years
    Sex sex = Sex::female;
    double height_in = 0.0;  // inches
    double weight_lb = 0.0;  // pounds
    double bmi = 0.0;
};

struct AttributeLabels {
    int age_class = 0;  // 0..4
    int sex_class = 0;  // 0..1
    int bmi_class = 0;  // 0..3
};

// Five left-closed 20-year intervals anchored at 0; everything >= 80 is
// class 4.
inline int bin_age(double age) {
    if (age < 0.0) throw ValidationError("age cannot be negative: " + std::to_string(age));
    const int cls = int(std::floor(age / 20.0));
    return cls > 4 ? 4 : cls;
}

// WHO cut points: <18.5 underweight, [18.5,25) healthy, [25,30) overweight,
// >=30 obese.
inline int bin_bmi(double bmi) {
    if (bmi <= 0.0) throw ValidationError("bmi must be positive: " + std::to_string(bmi));
    if (bmi < 18.5) return 0;
    if (bmi < 25.0) return 1;
    if (bmi < 30.0) return 2;
    return 3;
}

// Imperial formula: 703 * lb / in^2.
inline double compute_bmi(double height_in, double weight_lb) {
    if (height_in <= 0.0) {
        throw ValidationError("height must be positive: " + std::to_string(height_in));
    }
    return 703.0 * weight_lb / (height_in * height_in);
}

inline AttributeLabels labels_from_meta(const SubjectMeta& meta) {
    AttributeLabels l;
    l.age_class = bin_age(meta.age);
    l.sex_class = int(meta.sex);
    l.bmi_class = bin_bmi(meta.bmi);
    return l;
}

// ---------------------------------------------------------------------------
// Silhouette file (CGSL)
// ---------------------------------------------------------------------------

inline void write_silhouette(const std::string& path, const SilhouetteSequence& seq) {
    if (seq.frames < 1 || seq.height < 1 || seq.width < 1) {
        throw ValidationError("silhouette sequence needs positive frame count and extents");
    }
    if (int64_t(seq.mask.size()) != seq.frames * seq.height * seq.width) {
        throw ValidationError("silhouette mask buffer does not match declared extents");
    }
    std::string out;
    out.reserve(size_t(18 + seq.mask.size()));
    out += "CGSL";
    detail::put_u16(out, 1);
    detail::put_u32(out, uint32_t(seq.frames));
    detail::put_u32(out, uint32_t(seq.height));
    detail::put_u32(out, uint32_t(seq.width));
    for (uint8_t v : seq.mask) {
        if (v != 0 && v != 1) {
            throw ValidationError("silhouette mask values must be 0 or 1");
        }
        out.push_back(v ? char(0xff) : char(0x00));
    }
    detail::write_file_bytes(path, out);
}

inline SilhouetteSequence read_silhouette(const std::string& path) {
    const std::string buf = detail::read_file_bytes(path);
    detail::ByteReader r(buf);
    if (r.bytes(4, "magic") != "CGSL") {
        throw FormatError("silhouette file: bad magic, expected 'CGSL'", 0);
    }
    const size_t ver_at = r.pos;
    const uint16_t version = r.u16("version");
    if (version != 1) {
        throw FormatError("silhouette file: unsupported version " + std::to_string(version),
                          ver_at);
    }
    SilhouetteSequence seq;
    const size_t t_at = r.pos;
    seq.frames = r.u32("frame count");
    seq.height = r.u32("height");
    seq.width = r.u32("width");
    if (seq.frames < 1 || seq.height < 1 || seq.width < 1) {
        throw FormatError("silhouette file: zero extent in header", t_at);
    }
    const int64_t n = seq.frames * seq.height * seq.width;
    seq.mask.resize(size_t(n));
    r.need(size_t(n), "mask bytes");
    for (int64_t i = 0; i < n; ++i) {
        const uint8_t b = uint8_t(buf[r.pos + size_t(i)]);
        if (b != 0 && b != 0xff) {
            throw FormatError("silhouette file: mask byte must be 0 or 255, got " +
                              std::to_string(int(b)), r.pos + size_t(i));
        }
        seq.mask[size_t(i)] = b ? 1 : 0;
    }
    r.pos += size_t(n);
    if (r.pos != buf.size()) {
        throw FormatError("silhouette file: trailing bytes after mask data", r.pos);
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Pose/shape file (CGSM)
// ---------------------------------------------------------------------------

inline void write_smpl(const std::string& path, const SmplSequence& seq) {
    if (seq.frames < 1) {
        throw ValidationError("smpl sequence needs at least one frame");
    }
    if (int64_t(seq.values.size()) != seq.frames * 82) {
        throw ValidationError("smpl value buffer does not match declared frame count");
    }
    std::string out;
    out.reserve(size_t(14 + seq.values.size() * 4));
    out += "CGSM";
    detail::put_u16(out, 1);
    detail::put_u32(out, uint32_t(seq.frames));
    detail::put_u32(out, 82);
    for (float v : seq.values) detail::put_f32(out, v);
    detail::write_file_bytes(path, out);
}

inline SmplSequence read_smpl(const std::string& path) {
    const std::string buf = detail::read_file_bytes(path);
    detail::ByteReader r(buf);
    if (r.bytes(4, "magic") != "CGSM") {
        throw FormatError("smpl file: bad magic, expected 'CGSM'", 0);
    }
    const size_t ver_at = r.pos;
    const uint16_t version = r.u16("version");
    if (version != 1) {
        throw FormatError("smpl file: unsupported version " + std::to_string(version), ver_at);
    }
    SmplSequence seq;
    const size_t t_at = r.pos;
    seq.frames = r.u32("frame count");
    const size_t d_at = r.pos;
    const uint32_t d = r.u32("parameter width");
    if (seq.frames < 1) {
        throw FormatError("smpl file: zero frame count", t_at);
    }
    if (d != 82) {
        throw FormatError("smpl file: parameter width must be 82, got " + std::to_string(d),
                          d_at);
    }
    const int64_t n = seq.frames * 82;
    seq.values.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
        const size_t at = r.pos;
        const float v = r.f32("parameter value");
        if (!std::isfinite(v)) {
            throw FormatError("smpl file: non-finite parameter value", at);
        }
        seq.values[size_t(i)] = v;
    }
    if (r.pos != buf.size()) {
        throw FormatError("smpl file: trailing bytes after parameter data", r.pos);
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& range_tags() {
    static const std::vector<std::string> tags = {"close", "100m",  "200m", "400m",
                                                  "500m",  "600m", "1000m"};
    return tags;
}

inline bool is_known_range_tag(const std::string& tag) {
    for (const auto& t : range_tags()) {
        if (t == tag) return true;
    }
    return false;
}

struct ManifestEntry {
    std::string subject_id;
    std::string sequence_path;  // relative to the manifest directory
    std::string smpl_path;
    std::string split;          // "train" or "test"
    double age = 0.0;
    Sex sex = Sex::female;
    double height_in = 0.0;
    double weight_lb = 0.0;
    double bmi = 0.0;
    std::string view_tag;
    std::string range_tag = "close";

    SubjectMeta meta() const {
        return SubjectMeta{subject_id, age, sex, height_in, weight_lb, bmi};
    }
};

inline const char* kManifestHeader =
    "subject_id,sequence_path,smpl_path,split,age,sex,height_in,weight_lb,bmi,"
    "view_tag,range_tag";

inline void write_manifest(const std::string& path,
                           const std::vector<ManifestEntry>& entries) {
    std::ostringstream os;
    os << kManifestHeader << "\n";
    char buf[64];
    for (const auto& e : entries) {
        for (const std::string* field :
             {&e.subject_id, &e.sequence_path, &e.smpl_path, &e.split, &e.view_tag,
              &e.range_tag}) {
            if (field->find(',') != std::string::npos ||
                field->find('\n') != std::string::npos) {
                throw ValidationError("manifest fields may not contain commas or newlines: '" +
                                      *field + "'");
            }
        }
        if (e.split != "train" && e.split != "test") {
            throw ValidationError("manifest split must be 'train' or 'test', got '" +
                                  e.split + "'");
        }
        if (!is_known_range_tag(e.range_tag)) {
            throw ValidationError("unknown range tag '" + e.range_tag + "'");
        }
        os << e.subject_id << ',' << e.sequence_path << ',' << e.smpl_path << ','
           << e.split << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", e.age);
        os << buf << ',' << sex_name(e.sex) << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", e.height_in);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", e.weight_lb);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", e.bmi);
        os << buf << ',' << e.view_tag << ',' << e.range_tag << "\n";
    }
    detail::write_file_bytes(path, os.str());
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    const std::string buf = detail::read_file_bytes(path);
    std::vector<ManifestEntry> entries;
    size_t pos = 0;
    size_t line_no = 0;
    while (pos < buf.size()) {
        size_t end = buf.find('\n', pos);
        if (end == std::string::npos) end = buf.size();
        const std::string line = buf.substr(pos, end - pos);
        const size_t line_at = pos;
        pos = end + 1;
        ++line_no;
        if (line.empty()) continue;
        if (line_no == 1) {
            if (line != kManifestHeader) {
                throw FormatError("manifest: unexpected header '" + line + "'", line_at);
            }
            continue;
        }
        std::vector<std::string> fields;
        size_t fpos = 0;
        while (true) {
            const size_t comma = line.find(',', fpos);
            if (comma == std::string::npos) {
                fields.push_back(line.substr(fpos));
                break;
            }
            fields.push_back(line.substr(fpos, comma - fpos));
            fpos = comma + 1;
        }
        if (fields.size() != 11) {
            throw FormatError("manifest: line " + std::to_string(line_no) + " has " +
                              std::to_string(fields.size()) + " fields, expected 11", line_at);
        }
        ManifestEntry e;
        e.subject_id = fields[0];
        e.sequence_path = fields[1];
        e.smpl_path = fields[2];
        e.split = fields[3];
        try {
            e.age = std::stod(fields[4]);
            e.sex = sex_from_name(fields[5]);
            e.height_in = std::stod(fields[6]);
            e.weight_lb = std::stod(fields[7]);
            e.bmi = std::stod(fields[8]);
        } catch (const ValidationError&) {
            throw FormatError("manifest: bad sex value '" + fields[5] + "' on line " +
                              std::to_string(line_no), line_at);
        } catch (const std::exception&) {
            throw FormatError("manifest: unparseable numeric field on line " +
                              std::to_string(line_no), line_at);
        }
        e.view_tag = fields[9];
        e.range_tag = fields[10];
        if (e.split != "train" && e.split != "test") {
            throw FormatError("manifest: split must be 'train' or 'test' on line " +
                              std::to_string(line_no), line_at);
        }
        if (!is_known_range_tag(e.range_tag)) {
            throw FormatError("manifest: unknown range tag '" + e.range_tag + "' on line " +
                              std::to_string(line_no), line_at);
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace combogait
