#include "dc/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dc/rng.hpp"

namespace dc {

namespace {

std::vector<uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    in.seekg(0, std::ios::end);
    const auto len = in.tellg();
    in.seekg(0);
    std::vector<uint8_t> buf(static_cast<size_t>(len));
    in.read(reinterpret_cast<char*>(buf.data()), len);
    if (!in) throw IoError("short read on '" + path + "'");
    return buf;
}

uint32_t read_u32_be(const std::vector<uint8_t>& b, size_t off) {
    return (uint32_t(b[off]) << 24) | (uint32_t(b[off + 1]) << 16) | (uint32_t(b[off + 2]) << 8) |
           uint32_t(b[off + 3]);
}

void compute_channel_stats(const Tensor<float>& images, std::vector<float>& mean,
                           std::vector<float>& std_out) {
    const int64_t n = images.shape[0], c = images.shape[1];
    const int64_t plane = images.shape[2] * images.shape[3];
    mean.assign(static_cast<size_t>(c), 0.0f);
    std_out.assign(static_cast<size_t>(c), 0.0f);
    for (int64_t ch = 0; ch < c; ++ch) {
        double s = 0, s2 = 0;
        for (int64_t i = 0; i < n; ++i) {
            const float* p = images.data() + (i * c + ch) * plane;
            for (int64_t j = 0; j < plane; ++j) {
                s += p[j];
                s2 += double(p[j]) * p[j];
            }
        }
        const double cnt = static_cast<double>(n * plane);
        const double mu = s / cnt;
        const double var = std::max(0.0, s2 / cnt - mu * mu);
        mean[static_cast<size_t>(ch)] = static_cast<float>(mu);
        std_out[static_cast<size_t>(ch)] = static_cast<float>(std::max(std::sqrt(var), 1e-8));
    }
}

void apply_normalization(Dataset& ds, const std::vector<float>& mean, const std::vector<float>& std) {
    const int64_t n = ds.images.shape[0], c = ds.images.shape[1];
    const int64_t plane = ds.images.shape[2] * ds.images.shape[3];
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            float* p = ds.images.data() + (i * c + ch) * plane;
            const float mu = mean[static_cast<size_t>(ch)];
            const float inv = 1.0f / std[static_cast<size_t>(ch)];
            for (int64_t j = 0; j < plane; ++j) p[j] = (p[j] - mu) * inv;
        }
    ds.norm_mean = mean;
    ds.norm_std = std;
}

Dataset load_idx_raw(const std::string& images_path, const std::string& labels_path) {
    const auto ib = slurp(images_path);
    const auto lb = slurp(labels_path);
    if (ib.size() < 16) throw IoError("'" + images_path + "': truncated IDX header");
    if (lb.size() < 8) throw IoError("'" + labels_path + "': truncated IDX header");
    const uint32_t imagic = read_u32_be(ib, 0);
    if (imagic != 0x00000803u)
        throw IoError("'" + images_path + "': bad IDX magic at offset 0 (got 0x" +
                      [&] { std::ostringstream o; o << std::hex << imagic; return o.str(); }() +
                      ", want 0x803)");
    const uint32_t lmagic = read_u32_be(lb, 0);
    if (lmagic != 0x00000801u)
        throw IoError("'" + labels_path + "': bad IDX magic at offset 0 (got 0x" +
                      [&] { std::ostringstream o; o << std::hex << lmagic; return o.str(); }() +
                      ", want 0x801)");
    const uint32_t n = read_u32_be(ib, 4);
    const uint32_t rows = read_u32_be(ib, 8);
    const uint32_t cols = read_u32_be(ib, 12);
    const uint32_t ln = read_u32_be(lb, 4);
    if (n != ln)
        throw IoError("IDX count mismatch: " + std::to_string(n) + " images vs " +
                      std::to_string(ln) + " labels");
    const size_t need = 16 + size_t(n) * rows * cols;
    if (ib.size() != need)
        throw IoError("'" + images_path + "': payload length " + std::to_string(ib.size() - 16) +
                      " does not match header (" + std::to_string(size_t(n) * rows * cols) + ")");
    if (lb.size() != 8 + size_t(n))
        throw IoError("'" + labels_path + "': payload length mismatch");

    Dataset ds;
    ds.images = Tensor<float>({int64_t(n), 1, int64_t(rows), int64_t(cols)});
    for (size_t i = 0; i < size_t(n) * rows * cols; ++i)
        ds.images.v[i] = static_cast<float>(ib[16 + i]) / 255.0f;
    ds.labels.resize(n);
    int maxl = 0;
    for (size_t i = 0; i < n; ++i) {
        ds.labels[i] = lb[8 + i];
        maxl = std::max(maxl, ds.labels[i]);
    }
    ds.classes = maxl + 1;
    return ds;
}

} // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    Dataset ds = load_idx_raw(images_path, labels_path);
    std::vector<float> mean, std;
    compute_channel_stats(ds.images, mean, std);
    apply_normalization(ds, mean, std);
    return ds;
}

std::pair<Dataset, Dataset> load_mnist_dir(const std::string& dir, const std::string& name) {
    Dataset train = load_idx_raw(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte");
    Dataset test = load_idx_raw(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte");
    std::vector<float> mean, std;
    compute_channel_stats(train.images, mean, std);
    apply_normalization(train, mean, std);
    apply_normalization(test, mean, std);
    train.name = test.name = name;
    train.split = "train";
    test.split = "test";
    train.classes = test.classes = std::max(train.classes, test.classes);
    return {std::move(train), std::move(test)};
}

std::pair<Dataset, Dataset> load_cifar10_dir(const std::string& dir) {
    auto load_batches = [&](const std::vector<std::string>& files) {
        Dataset ds;
        std::vector<float> pixels;
        for (const auto& f : files) {
            const auto buf = slurp(dir + "/" + f);
            constexpr size_t rec = 1 + 3072;
            if (buf.size() % rec != 0)
                throw IoError("'" + f + "': size is not a multiple of " + std::to_string(rec));
            const size_t n = buf.size() / rec;
            for (size_t i = 0; i < n; ++i) {
                ds.labels.push_back(buf[i * rec]);
                for (size_t j = 0; j < 3072; ++j)
                    pixels.push_back(static_cast<float>(buf[i * rec + 1 + j]) / 255.0f);
            }
        }
        ds.images = Tensor<float>({static_cast<int64_t>(ds.labels.size()), 3, 32, 32},
                                  std::move(pixels));
        ds.classes = 10;
        ds.name = "cifar10";
        return ds;
    };
    Dataset train = load_batches({"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                  "data_batch_4.bin", "data_batch_5.bin"});
    Dataset test = load_batches({"test_batch.bin"});
    std::vector<float> mean, std;
    compute_channel_stats(train.images, mean, std);
    apply_normalization(train, mean, std);
    apply_normalization(test, mean, std);
    train.split = "train";
    test.split = "test";
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// toy dataset
// ---------------------------------------------------------------------------

Tensor<float> toy_template(int cls, int size) {
    if (cls < 0 || cls > 9) throw IoError("toy_template: class must be in [0,10)");
    // Shape- and texture-coded patterns (rather than position-coded) so class
    // identity survives translation jitter and spatial pooling.
    Tensor<float> t({1, 1, size, size});
    const double s = size;
    auto at = [&](int i, int j) -> float& { return t[i * size + j]; };
    auto in_disc = [&](int i, int j, double ci, double cj, double r) {
        const double di = i - ci, dj = j - cj;
        return di * di + dj * dj <= r * r;
    };
    const int thick = std::max(1, size / 8);
    switch (cls) {
        case 0:  // horizontal stripes
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j)
                    if ((i / 2) % 2 == 0) at(i, j) = 1.0f;
            break;
        case 1:  // vertical stripes
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j)
                    if ((j / 2) % 2 == 0) at(i, j) = 1.0f;
            break;
        case 2:  // filled disc
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j)
                    if (in_disc(i, j, s / 2 - 0.5, s / 2 - 0.5, s / 4.5)) at(i, j) = 1.0f;
            break;
        case 3:  // ring
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j)
                    if (in_disc(i, j, s / 2 - 0.5, s / 2 - 0.5, s / 2.7) &&
                        !in_disc(i, j, s / 2 - 0.5, s / 2 - 0.5, s / 2.7 - thick))
                        at(i, j) = 1.0f;
            break;
        case 4:  // plus sign
            for (int i = 0; i < size; ++i)
                for (int j = std::max(0, size / 2 - thick / 2 - 1); j < size / 2 + (thick + 1) / 2;
                     ++j) {
                    at(i, j) = 1.0f;
                    at(j, i) = 1.0f;
                }
            break;
        case 5:  // X (both diagonals)
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j)
                    if (std::abs(i - j) <= thick / 2 + 1 ||
                        std::abs(i + j - (size - 1)) <= thick / 2 + 1)
                        at(i, j) = 1.0f;
            break;
        case 6:  // checkerboard
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j)
                    if (((i / 3) + (j / 3)) % 2 == 0) at(i, j) = 1.0f;
            break;
        case 7:  // frame
            for (int i = 1; i < size - 1; ++i)
                for (int j = 1; j < size - 1; ++j)
                    if (i < 1 + thick || i >= size - 1 - thick || j < 1 + thick ||
                        j >= size - 1 - thick)
                        at(i, j) = 1.0f;
            break;
        case 8:  // lower triangle
            for (int i = 0; i < size; ++i)
                for (int j = 0; j <= i; ++j) at(i, j) = 1.0f;
            break;
        case 9:  // four dots
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j)
                    if (in_disc(i, j, s / 4 - 0.5, s / 4 - 0.5, s / 7) ||
                        in_disc(i, j, 3 * s / 4 - 0.5, 3 * s / 4 - 0.5, s / 7) ||
                        in_disc(i, j, s / 4 - 0.5, 3 * s / 4 - 0.5, s / 7) ||
                        in_disc(i, j, 3 * s / 4 - 0.5, s / 4 - 0.5, s / 7))
                        at(i, j) = 1.0f;
            break;
        default: break;
    }
    // one box-blur pass softens the mask edges so small translations keep
    // most of the pixel overlap, then rescale the peak back to 1
    Tensor<float> blurred({1, 1, size, size});
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            double acc = 0;
            int n = 0;
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    const int a = i + di, b = j + dj;
                    if (a < 0 || a >= size || b < 0 || b >= size) continue;
                    acc += t[a * size + b];
                    n++;
                }
            blurred[i * size + j] = static_cast<float>(acc / n);
        }
    float peak = 0;
    for (float v : blurred.v) peak = std::max(peak, v);
    if (peak > 0)
        for (auto& v : blurred.v) v /= peak;
    return blurred;
}

std::pair<Dataset, Dataset> make_toy(int classes, int per_class, int size, uint64_t seed,
                                     const ToyOptions& opt) {
    if (classes < 1 || classes > 10) throw IoError("make_toy: classes must be in [1,10]");
    if (size < 8) throw IoError("make_toy: size must be >= 8");
    const int test_per_class = opt.test_per_class > 0 ? opt.test_per_class
                                                      : std::max(10, per_class / 5);

    std::vector<Tensor<float>> templates;
    templates.reserve(static_cast<size_t>(classes));
    for (int c = 0; c < classes; ++c) templates.push_back(toy_template(c, size));

    auto build = [&](int n_per_class, uint64_t split_id, const char* split) {
        Dataset ds;
        ds.images = Tensor<float>({int64_t(classes) * n_per_class, 1, size, size});
        ds.labels.resize(static_cast<size_t>(classes) * n_per_class);
        ds.classes = classes;
        ds.name = "toy";
        ds.split = split;
        const int64_t plane = int64_t(size) * size;
        for (int c = 0; c < classes; ++c) {
            Rng rng(derive_stream(seed, split_id, static_cast<uint64_t>(c)));
            const auto& tpl = templates[static_cast<size_t>(c)];
            for (int k = 0; k < n_per_class; ++k) {
                const int64_t row = int64_t(c) * n_per_class + k;
                ds.labels[static_cast<size_t>(row)] = c;
                const int dy = static_cast<int>(rng.uniform_int(2 * opt.jitter + 1)) - opt.jitter;
                const int dx = static_cast<int>(rng.uniform_int(2 * opt.jitter + 1)) - opt.jitter;
                const float amp = static_cast<float>(rng.uniform(opt.amp_lo, opt.amp_hi));
                float* out = ds.images.data() + row * plane;
                for (int i = 0; i < size; ++i)
                    for (int j = 0; j < size; ++j) {
                        const int si = i - dy, sj = j - dx;
                        float v = 0.0f;
                        if (si >= 0 && si < size && sj >= 0 && sj < size)
                            v = amp * tpl[si * size + sj];
                        v += static_cast<float>(rng.normal(0.0, opt.noise_std));
                        out[i * size + j] = v;
                    }
            }
        }
        return ds;
    };

    Dataset train = build(per_class, 1, "train");
    Dataset test = build(test_per_class, 2, "test");
    std::vector<float> mean, std;
    compute_channel_stats(train.images, mean, std);
    apply_normalization(train, mean, std);
    apply_normalization(test, mean, std);
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// .dcgm serialization
// ---------------------------------------------------------------------------

namespace {

void put_u16(std::vector<uint8_t>& b, uint16_t v) {
    b.push_back(v & 0xff);
    b.push_back((v >> 8) & 0xff);
}
void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xff);
}
void put_f32(std::vector<uint8_t>& b, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(b, u);
}
void put_i32(std::vector<uint8_t>& b, int32_t v) { put_u32(b, static_cast<uint32_t>(v)); }

struct Reader {
    const std::vector<uint8_t>& b;
    size_t off = 0;
    std::string path;

    void need(size_t n, const char* what) {
        if (off + n > b.size())
            throw IoError("'" + path + "': truncated " + what + " at offset " + std::to_string(off));
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = b[off] | (uint16_t(b[off + 1]) << 8);
        off += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(b[off + i]) << (8 * i);
        off += 4;
        return v;
    }
    float f32(const char* what) {
        const uint32_t u = u32(what);
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    int32_t i32(const char* what) { return static_cast<int32_t>(u32(what)); }
};

struct CondensedHeader {
    uint16_t version;
    uint32_t classes, ipc, c, h, w;
    std::vector<float> mean, std;
    std::string provenance;
};

CondensedHeader read_header(Reader& r) {
    r.need(4, "magic");
    if (std::memcmp(r.b.data(), "DCGM", 4) != 0)
        throw IoError("'" + r.path + "': bad magic at offset 0 (want \"DCGM\")");
    r.off = 4;
    CondensedHeader h;
    h.version = r.u16("version");
    if (h.version != kCondensedFormatVersion)
        throw IoError("'" + r.path + "': unsupported format version " + std::to_string(h.version));
    (void)r.u16("reserved");
    h.classes = r.u32("class count");
    h.ipc = r.u32("ipc");
    h.c = r.u32("channels");
    h.h = r.u32("height");
    h.w = r.u32("width");
    for (uint32_t i = 0; i < h.c; ++i) h.mean.push_back(r.f32("mean"));
    for (uint32_t i = 0; i < h.c; ++i) h.std.push_back(r.f32("std"));
    const uint32_t plen = r.u32("provenance length");
    r.need(plen, "provenance");
    h.provenance.assign(reinterpret_cast<const char*>(r.b.data() + r.off), plen);
    r.off += plen;
    return h;
}

} // namespace

void save_condensed(const SyntheticSet& set, const std::string& path) {
    const int64_t n = set.images.shape[0];
    if (n != int64_t(set.classes) * set.ipc || set.labels.size() != static_cast<size_t>(n))
        throw IoError("save_condensed: inconsistent synthetic set");
    std::vector<uint8_t> b;
    b.reserve(64 + set.images.v.size() * 4);
    b.insert(b.end(), {'D', 'C', 'G', 'M'});
    put_u16(b, kCondensedFormatVersion);
    put_u16(b, 0);
    put_u32(b, static_cast<uint32_t>(set.classes));
    put_u32(b, static_cast<uint32_t>(set.ipc));
    put_u32(b, static_cast<uint32_t>(set.images.shape[1]));
    put_u32(b, static_cast<uint32_t>(set.images.shape[2]));
    put_u32(b, static_cast<uint32_t>(set.images.shape[3]));
    for (int64_t i = 0; i < set.images.shape[1]; ++i)
        put_f32(b, i < static_cast<int64_t>(set.norm_mean.size()) ? set.norm_mean[static_cast<size_t>(i)] : 0.0f);
    for (int64_t i = 0; i < set.images.shape[1]; ++i)
        put_f32(b, i < static_cast<int64_t>(set.norm_std.size()) ? set.norm_std[static_cast<size_t>(i)] : 1.0f);
    put_u32(b, static_cast<uint32_t>(set.provenance.size()));
    b.insert(b.end(), set.provenance.begin(), set.provenance.end());
    for (int v : set.labels) put_i32(b, v);
    for (float v : set.images.v) put_f32(b, v);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (!out) throw IoError("short write on '" + path + "'");
}

SyntheticSet load_condensed(const std::string& path) {
    const auto buf = slurp(path);
    Reader r{buf, 0, path};
    const auto h = read_header(r);
    const int64_t n = int64_t(h.classes) * h.ipc;
    const int64_t px = n * h.c * h.h * h.w;
    const size_t expect = r.off + 4 * static_cast<size_t>(n) + 4 * static_cast<size_t>(px);
    if (buf.size() != expect)
        throw IoError("'" + path + "': payload length mismatch (file " + std::to_string(buf.size()) +
                      " bytes, header implies " + std::to_string(expect) + ")");
    SyntheticSet set;
    set.classes = static_cast<int>(h.classes);
    set.ipc = static_cast<int>(h.ipc);
    set.norm_mean = h.mean;
    set.norm_std = h.std;
    set.provenance = h.provenance;
    set.labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) set.labels[static_cast<size_t>(i)] = r.i32("label");
    for (int64_t i = 0; i < n; ++i)
        if (set.labels[static_cast<size_t>(i)] != static_cast<int>(i / h.ipc))
            throw IoError("'" + path + "': labels are not balanced class-major");
    set.images = Tensor<float>({n, int64_t(h.c), int64_t(h.h), int64_t(h.w)});
    for (int64_t i = 0; i < px; ++i) set.images.v[static_cast<size_t>(i)] = r.f32("pixel");
    return set;
}

std::string describe_condensed(const std::string& path) {
    const auto buf = slurp(path);
    Reader r{buf, 0, path};
    const auto h = read_header(r);
    std::ostringstream os;
    os << "version " << h.version << ", classes " << h.classes << ", ipc " << h.ipc << ", image "
       << h.c << "x" << h.h << "x" << h.w << "\n";
    os << "norm mean";
    for (float m : h.mean) os << ' ' << m;
    os << ", norm std";
    for (float s : h.std) os << ' ' << s;
    os << "\nprovenance: " << (h.provenance.empty() ? "(none)" : h.provenance) << "\n";
    return os.str();
}

void export_image_grid(const SyntheticSet& set, const std::string& path) {
    const int64_t c = set.images.shape[1], h = set.images.shape[2], w = set.images.shape[3];
    const int64_t gh = set.classes * h, gw = set.ipc * w;
    std::vector<uint8_t> pixels(static_cast<size_t>(gh * gw * c), 0);
    for (int cls = 0; cls < set.classes; ++cls)
        for (int k = 0; k < set.ipc; ++k) {
            const int64_t img = int64_t(cls) * set.ipc + k;
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t i = 0; i < h; ++i)
                    for (int64_t j = 0; j < w; ++j) {
                        float v = set.images[((img * c + ch) * h + i) * w + j];
                        const float mu = ch < static_cast<int64_t>(set.norm_mean.size())
                                             ? set.norm_mean[static_cast<size_t>(ch)] : 0.0f;
                        const float sd = ch < static_cast<int64_t>(set.norm_std.size())
                                             ? set.norm_std[static_cast<size_t>(ch)] : 1.0f;
                        v = v * sd + mu;
                        v = std::clamp(v, 0.0f, 1.0f);
                        const int64_t gi = cls * h + i, gj = int64_t(k) * w + j;
                        pixels[static_cast<size_t>((gi * gw + gj) * c + ch)] =
                            static_cast<uint8_t>(std::lround(v * 255.0f));
                    }
        }
    write_png(path, pixels, static_cast<int>(gw), static_cast<int>(gh), static_cast<int>(c));
}

} // namespace dc
