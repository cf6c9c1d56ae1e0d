// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/io.hpp"

#include "refsplat/errors.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace refsplat {

using nlohmann::json;

namespace {

std::string
str(const fs::path &p) {
    return p.string();
}

std::vector<char>
read_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(str(path), "file", "cannot open for reading");
    }
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void
write_file(const fs::path &path, const void *data, std::size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError(str(path), "file", "cannot open for writing");
    }
    out.write(static_cast<const char *>(data), static_cast<std::streamsize>(n));
    if (!out) {
        throw DataError(str(path), "file", "write failed");
    }
}

json
read_json(const fs::path &path) {
    const auto bytes = read_file(path);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception &e) {
        throw DataError(str(path), "json", e.what());
    }
}

void
write_json(const fs::path &path, const json &j) {
    const std::string text = j.dump(1) + "\n";
    write_file(path, text.data(), text.size());
}

template <typename T>
T
field(const json &j, const char *name, const fs::path &path) {
    if (!j.is_object() || !j.contains(name)) {
        throw DataError(str(path), name, "missing field");
    }
    try {
        return j.at(name).get<T>();
    } catch (const json::exception &e) {
        throw DataError(str(path), name, e.what());
    }
}

std::uint8_t
to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

json
gaussian_array(const std::vector<Gaussian> &gs) {
    json ids = json::array();
    for (const auto &g : gs) {
        ids.push_back(g.lineage_id);
    }
    return ids;
}

constexpr int kGaussianScalars = 14;

void
pack(const Gaussian &g, std::vector<double> &out) {
    out.insert(out.end(), g.mu.data(), g.mu.data() + 3);
    out.insert(out.end(), g.rot.data(), g.rot.data() + 4);
    out.insert(out.end(), g.scale.data(), g.scale.data() + 3);
    out.push_back(g.opacity);
    out.insert(out.end(), g.color.data(), g.color.data() + 3);
}

Gaussian
unpack(const double *p, std::int64_t id) {
    Gaussian g;
    g.mu         = Vec3(p[0], p[1], p[2]);
    g.rot        = Quat(p[3], p[4], p[5], p[6]);
    g.scale      = Vec3(p[7], p[8], p[9]);
    g.opacity    = p[10];
    g.color      = Vec3(p[11], p[12], p[13]);
    g.lineage_id = id;
    return g;
}

constexpr char kMagic[8] = {'R', 'S', 'P', 'L', 'C', 'K', 'P', 'T'};

} // namespace

// ---------------------------------------------------------------------------
// Rasters

void
write_png(const Image &image, const fs::path &path) {
    if (image.channels != 3) {
        throw DataError(str(path), "channels", "PNG export expects 3 channels");
    }
    std::vector<std::uint8_t> bytes(image.data.size());
    std::transform(image.data.begin(), image.data.end(), bytes.begin(), to_byte);
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width   = static_cast<png_uint_32>(image.width);
    img.height  = static_cast<png_uint_32>(image.height);
    img.format  = PNG_FORMAT_RGB;
    if (png_image_write_to_file(&img, str(path).c_str(), 0, bytes.data(), 0, nullptr) == 0) {
        throw DataError(str(path), "png", img.message);
    }
}

Image
read_png(const fs::path &path) {
    if (!fs::exists(path)) {
        throw DataError(str(path), "file", "missing file");
    }
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&img, str(path).c_str()) == 0) {
        throw DataError(str(path), "png", img.message);
    }
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
    if (png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr) == 0) {
        png_image_free(&img);
        throw DataError(str(path), "png", img.message);
    }
    Image out(static_cast<int>(img.width), static_cast<int>(img.height), 3);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        out.data[i] = bytes[i] / 255.0;
    }
    return out;
}

void
write_pgm(const Mask &mask, const fs::path &path) {
    std::string header = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
    std::vector<char> buf(header.begin(), header.end());
    buf.insert(buf.end(), mask.data.begin(), mask.data.end());
    write_file(path, buf.data(), buf.size());
}

Mask
read_pgm(const fs::path &path) {
    if (!fs::exists(path)) {
        throw DataError(str(path), "file", "missing file");
    }
    const auto bytes = read_file(path);
    std::size_t pos  = 0;
    auto token       = [&]() {
        std::string t;
        while (pos < bytes.size()) {
            const char c = bytes[pos];
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') {
                    ++pos;
                }
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos;
                if (!t.empty()) {
                    return t;
                }
            } else {
                t.push_back(c);
                ++pos;
            }
        }
        return t;
    };
    if (token() != "P5") {
        throw DataError(str(path), "magic", "not a binary PGM (P5)");
    }
    int w = 0, h = 0, maxv = 0;
    try {
        w    = std::stoi(token());
        h    = std::stoi(token());
        maxv = std::stoi(token());
    } catch (const std::exception &) {
        throw DataError(str(path), "header", "malformed PGM header");
    }
    if (w <= 0 || h <= 0 || maxv != 255) {
        throw DataError(str(path), "header", "unsupported PGM dimensions or depth");
    }
    if (bytes.size() - pos < static_cast<std::size_t>(w) * h) {
        throw DataError(str(path), "data", "truncated PGM payload");
    }
    Mask m(w, h, 1);
    std::memcpy(m.data.data(), bytes.data() + pos, m.data.size());
    return m;
}

fs::path
f32_sidecar(const fs::path &path) {
    fs::path p = path;
    return p.replace_extension(".json");
}

void
write_f32(const DepthMap &depth, const fs::path &path) {
    std::vector<float> buf(depth.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        buf[i] = static_cast<float>(depth.data[i]);
    }
    static_assert(std::endian::native == std::endian::little, "f32 rasters are written little-endian");
    write_file(path, buf.data(), buf.size() * sizeof(float));
    write_json(f32_sidecar(path), json{{"width", depth.width}, {"height", depth.height}});
}

DepthMap
read_f32(const fs::path &path) {
    if (!fs::exists(path)) {
        throw DataError(str(path), "file", "missing file");
    }
    const fs::path side = f32_sidecar(path);
    if (!fs::exists(side)) {
        throw DataError(str(side), "file", "missing sidecar");
    }
    const json meta = read_json(side);
    const int w     = field<int>(meta, "width", side);
    const int h     = field<int>(meta, "height", side);
    if (w <= 0 || h <= 0) {
        throw DataError(str(side), "width", "non-positive raster size");
    }
    const auto bytes = read_file(path);
    if (bytes.size() != static_cast<std::size_t>(w) * h * sizeof(float)) {
        throw DataError(str(path), "size", "payload does not match sidecar dimensions " + std::to_string(w) + "x" +
                                               std::to_string(h));
    }
    DepthMap d(w, h, 1);
    for (std::size_t i = 0; i < d.data.size(); ++i) {
        float v;
        std::memcpy(&v, bytes.data() + i * sizeof(float), sizeof(float));
        d.data[i] = v;
    }
    return d;
}

fs::path
frame_path(const fs::path &dir, int frame, const std::string &suffix) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%05d.", frame);
    return dir / (std::string(name) + suffix);
}

// ---------------------------------------------------------------------------
// Bundles

void
save_bundle(const PriorBundle &b, const fs::path &dir) {
    fs::create_directories(dir);
    json cams = json::array();
    for (std::size_t f = 0; f < b.cameras.size(); ++f) {
        const Camera &c = b.cameras[f];
        std::vector<double> K(9), E(16);
        for (int r = 0; r < 3; ++r) {
            for (int q = 0; q < 3; ++q) {
                K[r * 3 + q] = c.K(r, q);
            }
        }
        for (int r = 0; r < 4; ++r) {
            for (int q = 0; q < 4; ++q) {
                E[r * 4 + q] = c.E(r, q);
            }
        }
        cams.push_back({{"t", f < b.frames.size() ? b.frames[f].t : 0.0},
                        {"K", K},
                        {"E", E},
                        {"width", c.width},
                        {"height", c.height}});
    }
    write_json(dir / "cameras.json", cams);

    json sparse = json::array();
    for (std::size_t f = 0; f < b.frames.size(); ++f) {
        const auto &fr = b.frames[f];
        const int i    = static_cast<int>(f);
        write_png(fr.image, frame_path(dir, i, "image.png"));
        write_pgm(fr.mask, frame_path(dir, i, "mask.pgm"));
        write_f32(fr.depth_com, frame_path(dir, i, "depth_com.f32"));
        write_f32(fr.depth_hum, frame_path(dir, i, "depth_hum.f32"));
        json pts = json::array();
        for (const auto &p : fr.sparse_points) {
            pts.push_back({p.x(), p.y(), p.z()});
        }
        sparse.push_back(pts);
    }
    write_json(dir / "sparse_points.json", sparse);

    json kps = json::array();
    for (const auto &t : b.tracks) {
        json obs = json::array();
        for (const auto &o : t.obs) {
            obs.push_back({{"t", o.t}, {"pixel", {o.pixel.x(), o.pixel.y()}}, {"visible", o.visible}});
        }
        kps.push_back({{"kp_id", t.kp_id}, {"part_id", t.part_id}, {"uv", {t.uv.x(), t.uv.y()}}, {"obs", obs}});
    }
    write_json(dir / "keypoints.json", kps);
}

PriorBundle
load_bundle(const fs::path &dir) {
    if (!fs::is_directory(dir)) {
        throw DataError(str(dir), "directory", "bundle directory does not exist");
    }
    PriorBundle b;
    const fs::path camPath = dir / "cameras.json";
    const json cams        = read_json(camPath);
    if (!cams.is_array() || cams.empty()) {
        throw DataError(str(camPath), "cameras", "expected a nonempty array");
    }
    std::vector<double> times;
    for (const auto &c : cams) {
        Camera cam;
        const auto K = field<std::vector<double>>(c, "K", camPath);
        const auto E = field<std::vector<double>>(c, "E", camPath);
        if (K.size() != 9) {
            throw DataError(str(camPath), "K", "expected 9 values");
        }
        if (E.size() != 16) {
            throw DataError(str(camPath), "E", "expected 16 values");
        }
        for (int r = 0; r < 3; ++r) {
            for (int q = 0; q < 3; ++q) {
                cam.K(r, q) = K[r * 3 + q];
            }
        }
        for (int r = 0; r < 4; ++r) {
            for (int q = 0; q < 4; ++q) {
                cam.E(r, q) = E[r * 4 + q];
            }
        }
        cam.width  = field<int>(c, "width", camPath);
        cam.height = field<int>(c, "height", camPath);
        try {
            cam.validate();
        } catch (const DataError &e) {
            throw DataError(str(camPath), e.field, e.what());
        }
        times.push_back(field<double>(c, "t", camPath));
        b.cameras.push_back(cam);
    }

    const fs::path sparsePath = dir / "sparse_points.json";
    const json sparse         = read_json(sparsePath);
    if (!sparse.is_array() || sparse.size() != cams.size()) {
        throw DataError(str(sparsePath), "frames", "expected one point array per camera");
    }

    for (std::size_t f = 0; f < cams.size(); ++f) {
        const int i = static_cast<int>(f);
        FramePriors fr;
        fr.t         = times[f];
        fr.image     = read_png(frame_path(dir, i, "image.png"));
        fr.mask      = read_pgm(frame_path(dir, i, "mask.pgm"));
        fr.depth_com = read_f32(frame_path(dir, i, "depth_com.f32"));
        fr.depth_hum = read_f32(frame_path(dir, i, "depth_hum.f32"));
        for (const auto &p : sparse[f]) {
            if (!p.is_array() || p.size() != 3) {
                throw DataError(str(sparsePath), "point", "expected 3-vectors");
            }
            fr.sparse_points.emplace_back(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
        }
        b.frames.push_back(std::move(fr));
    }

    const fs::path kpPath = dir / "keypoints.json";
    const json kps        = read_json(kpPath);
    if (!kps.is_array()) {
        throw DataError(str(kpPath), "tracks", "expected an array");
    }
    for (const auto &k : kps) {
        KeypointTrack t;
        t.kp_id      = field<int>(k, "kp_id", kpPath);
        t.part_id    = field<int>(k, "part_id", kpPath);
        const auto uv = field<std::vector<double>>(k, "uv", kpPath);
        if (uv.size() != 2) {
            throw DataError(str(kpPath), "uv", "expected 2 values");
        }
        t.uv = Vec2(uv[0], uv[1]);
        if (!k.contains("obs") || !k["obs"].is_array()) {
            throw DataError(str(kpPath), "obs", "missing observation array");
        }
        for (const auto &o : k["obs"]) {
            KeypointObservation ob;
            ob.t         = field<double>(o, "t", kpPath);
            const auto p = field<std::vector<double>>(o, "pixel", kpPath);
            if (p.size() != 2) {
                throw DataError(str(kpPath), "pixel", "expected 2 values");
            }
            ob.pixel   = Vec2(p[0], p[1]);
            ob.visible = field<bool>(o, "visible", kpPath);
            t.obs.push_back(ob);
        }
        b.tracks.push_back(std::move(t));
    }
    validate_bundle(b, dir);
    return b;
}

void
validate_bundle(const PriorBundle &b, const fs::path &dir) {
    if (b.cameras.size() != b.frames.size()) {
        throw DataError(str(dir / "cameras.json"), "count", "camera count differs from frame count");
    }
    for (std::size_t f = 0; f < b.frames.size(); ++f) {
        const int i       = static_cast<int>(f);
        const Camera &cam = b.cameras[f];
        const auto &fr    = b.frames[f];
        auto check        = [&](int w, int h, const std::string &suffix) {
            if (w != cam.width || h != cam.height) {
                throw DataError(str(frame_path(dir, i, suffix)), "dimensions",
                                std::to_string(w) + "x" + std::to_string(h) + " differs from camera " +
                                    std::to_string(cam.width) + "x" + std::to_string(cam.height));
            }
        };
        check(fr.image.width, fr.image.height, "image.png");
        check(fr.mask.width, fr.mask.height, "mask.pgm");
        check(fr.depth_com.width, fr.depth_com.height, "depth_com.f32");
        check(fr.depth_hum.width, fr.depth_hum.height, "depth_hum.f32");
        for (std::size_t p = 0; p < fr.mask.pixel_count(); ++p) {
            if (fr.mask.data[p] == 0 && is_valid_depth(fr.depth_hum.data[p])) {
                throw DataError(str(frame_path(dir, i, "depth_hum.f32")), "mask",
                                "valid human depth outside the mask at pixel " + std::to_string(p));
            }
        }
    }
    for (const auto &t : b.tracks) {
        if (t.obs.size() != b.frames.size()) {
            throw DataError(str(dir / "keypoints.json"), "obs",
                            "track " + std::to_string(t.kp_id) + " does not have one observation per frame");
        }
        for (std::size_t f = 0; f < t.obs.size(); ++f) {
            const auto &o = t.obs[f];
            const auto &c = b.cameras[f];
            if (o.visible && !(o.pixel.x() >= -0.5 && o.pixel.x() < c.width - 0.5 && o.pixel.y() >= -0.5 &&
                               o.pixel.y() < c.height - 0.5)) {
                throw DataError(str(dir / "keypoints.json"), "pixel",
                                "track " + std::to_string(t.kp_id) + " visible outside the image in frame " +
                                    std::to_string(f));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

void
save_checkpoint(const fs::path &path, const GaussianFrameSet &frameSet, const DeformNetParams &params,
                const json &meta) {
    frameSet.check_synchronized();
    params.check_shapes();
    const auto &a = params.arch;
    json header;
    header["version"]        = 1;
    header["ref_times"]      = frameSet.ref_times;
    header["num_refs"]       = frameSet.num_refs();
    header["num_human"]      = frameSet.num_human();
    header["num_background"] = frameSet.background.size();
    header["human_ids"]      = frameSet.frames.empty() ? json::array() : gaussian_array(frameSet.frames.front());
    header["background_ids"] = gaussian_array(frameSet.background);
    json lineage             = json::array();
    for (const auto &[child, parent] : frameSet.lineage) {
        lineage.push_back({child, parent});
    }
    header["lineage"]       = lineage;
    header["visibility"]    = frameSet.visibility.flags;
    header["seed_keypoint"] = frameSet.seed_keypoint;
    header["arch"]          = {{"num_refs", a.num_refs},
                               {"depth", a.depth},
                               {"width", a.width},
                               {"skip_after", a.skip_after},
                               {"pos_frequencies", a.encoding.pos_frequencies},
                               {"time_frequencies", a.encoding.time_frequencies}};
    header["param_count"]   = params.parameter_count();
    header["meta"]          = meta;

    std::vector<double> values;
    for (const auto &frame : frameSet.frames) {
        for (const auto &g : frame) {
            pack(g, values);
        }
    }
    for (const auto &g : frameSet.background) {
        pack(g, values);
    }
    const Eigen::VectorXd flat = params.flatten();
    values.insert(values.end(), flat.data(), flat.data() + flat.size());
    header["value_count"] = values.size();

    const std::string text = header.dump();
    const std::uint64_t n  = text.size();
    std::vector<char> buf;
    buf.insert(buf.end(), kMagic, kMagic + 8);
    const auto *np = reinterpret_cast<const char *>(&n);
    buf.insert(buf.end(), np, np + sizeof(n));
    buf.insert(buf.end(), text.begin(), text.end());
    const auto *vp = reinterpret_cast<const char *>(values.data());
    buf.insert(buf.end(), vp, vp + values.size() * sizeof(double));
    fs::path tmp = path;
    tmp += ".tmp";
    write_file(tmp, buf.data(), buf.size());
    fs::rename(tmp, path);
}

Checkpoint
load_checkpoint(const fs::path &path) {
    if (!fs::exists(path)) {
        throw DataError(str(path), "file", "missing checkpoint");
    }
    const auto bytes = read_file(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw DataError(str(path), "magic", "not a checkpoint file");
    }
    std::uint64_t n = 0;
    std::memcpy(&n, bytes.data() + 8, sizeof(n));
    if (n > bytes.size() - 16) {
        throw DataError(str(path), "header_length", "header length exceeds file size");
    }
    json h;
    try {
        h = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(n));
    } catch (const json::exception &e) {
        throw DataError(str(path), "header", e.what());
    }
    const auto nRefs  = field<int>(h, "num_refs", path);
    const auto nHuman = field<std::size_t>(h, "num_human", path);
    const auto nBg    = field<std::size_t>(h, "num_background", path);
    const auto nVal   = field<std::size_t>(h, "value_count", path);
    const auto hIds   = field<std::vector<std::int64_t>>(h, "human_ids", path);
    const auto bIds   = field<std::vector<std::int64_t>>(h, "background_ids", path);
    if (hIds.size() != nHuman || bIds.size() != nBg) {
        throw DataError(str(path), "human_ids", "id lists disagree with the counts");
    }
    const std::size_t payload = bytes.size() - 16 - n;
    if (payload != nVal * sizeof(double)) {
        throw DataError(str(path), "value_count", "payload size does not match the header");
    }
    std::vector<double> values(nVal);
    std::memcpy(values.data(), bytes.data() + 16 + n, payload);

    Checkpoint ck;
    auto &fs_     = ck.frame_set;
    fs_.ref_times = field<std::vector<double>>(h, "ref_times", path);
    const std::size_t gaussianValues = (static_cast<std::size_t>(nRefs) * nHuman + nBg) * kGaussianScalars;
    if (nVal < gaussianValues) {
        throw DataError(str(path), "value_count", "too few values for the Gaussian arrays");
    }
    std::size_t off = 0;
    fs_.frames.assign(nRefs, {});
    for (int i = 0; i < nRefs; ++i) {
        for (std::size_t k = 0; k < nHuman; ++k) {
            fs_.frames[i].push_back(unpack(values.data() + off, hIds[k]));
            off += kGaussianScalars;
        }
    }
    for (std::size_t k = 0; k < nBg; ++k) {
        fs_.background.push_back(unpack(values.data() + off, bIds[k]));
        off += kGaussianScalars;
    }
    for (const auto &pair : field<json>(h, "lineage", path)) {
        fs_.lineage[pair.at(0).get<std::int64_t>()] = pair.at(1).get<std::int64_t>();
    }
    fs_.visibility.num_refs = nRefs;
    fs_.visibility.flags    = field<std::vector<std::uint8_t>>(h, "visibility", path);
    fs_.seed_keypoint       = field<std::vector<int>>(h, "seed_keypoint", path);
    try {
        fs_.check_synchronized();
    } catch (const InvalidStateError &e) {
        throw DataError(str(path), "frame_set", e.what());
    }

    const json a = field<json>(h, "arch", path);
    NetArchitecture arch;
    arch.num_refs                  = field<int>(a, "num_refs", path);
    arch.depth                     = field<int>(a, "depth", path);
    arch.width                     = field<int>(a, "width", path);
    arch.skip_after                = field<int>(a, "skip_after", path);
    arch.encoding.pos_frequencies  = field<int>(a, "pos_frequencies", path);
    arch.encoding.time_frequencies = field<int>(a, "time_frequencies", path);
    try {
        arch.validate();
    } catch (const ConfigError &e) {
        throw DataError(str(path), "arch", e.what());
    }
    ck.params = DeformNetParams::initialize(arch, 0);
    if (ck.params.parameter_count() != nVal - off) {
        throw DataError(str(path), "param_count", "network payload does not match the architecture");
    }
    ck.params.assign(Eigen::Map<const Eigen::VectorXd>(values.data() + off, static_cast<Eigen::Index>(nVal - off)));
    if (h.contains("meta")) {
        ck.meta = h["meta"];
    }
    return ck;
}

} // namespace refsplat
