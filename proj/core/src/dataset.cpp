#include "cimsim/dataset.hpp"

#include <fstream>

#include "cimsim/rng.hpp"

namespace cimsim {

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

std::uint64_t bytes_hash(const std::vector<unsigned char>& bytes) {
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::uint32_t be32(const std::vector<unsigned char>& b, size_t off, const std::string& file) {
    if (off + 4 > b.size()) {
        throw DataError(file + ": truncated at byte offset " + std::to_string(off));
    }
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

} // namespace

Dataset Dataset::head(int n) const {
    if (n <= 0 || n >= size()) return *this;
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    return select(idx);
}

Dataset Dataset::select(const std::vector<int>& indices) const {
    Dataset out;
    out.n_classes = n_classes;
    out.split = split;
    out.checksums = checksums;
    const std::int64_t sample = images.numel() / std::max(1, size());
    std::vector<int> shape = images.shape;
    shape[0] = static_cast<int>(indices.size());
    out.images = Tensor(shape);
    out.labels.resize(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        const int src = indices[i];
        if (src < 0 || src >= size()) throw DataError("dataset select: index out of range");
        std::copy_n(&images.data[static_cast<size_t>(src) * sample], sample,
                    &out.images.data[i * sample]);
        out.labels[i] = labels[src];
    }
    return out;
}

Dataset load_mnist(const std::filesystem::path& dir, const std::string& split) {
    const std::string stem = split == "train" ? "train" : "t10k";
    if (split != "train" && split != "test") throw ConfigError("load_mnist: split must be train|test");
    const auto img_path = dir / (stem + "-images-idx3-ubyte");
    const auto lbl_path = dir / (stem + "-labels-idx1-ubyte");
    const auto img = read_all(img_path);
    const auto lbl = read_all(lbl_path);

    const std::string img_name = img_path.filename().string();
    const std::string lbl_name = lbl_path.filename().string();
    if (be32(img, 0, img_name) != 0x00000803u) {
        throw DataError(img_name + ": bad magic at byte offset 0 (want 0x00000803)");
    }
    if (be32(lbl, 0, lbl_name) != 0x00000801u) {
        throw DataError(lbl_name + ": bad magic at byte offset 0 (want 0x00000801)");
    }
    const int n = static_cast<int>(be32(img, 4, img_name));
    const int h = static_cast<int>(be32(img, 8, img_name));
    const int w = static_cast<int>(be32(img, 12, img_name));
    const int n_lbl = static_cast<int>(be32(lbl, 4, lbl_name));
    if (n != n_lbl) {
        throw DataError("mnist: image count " + std::to_string(n) + " != label count " +
                        std::to_string(n_lbl));
    }
    const size_t want_img = 16 + static_cast<size_t>(n) * h * w;
    if (img.size() != want_img) {
        throw DataError(img_name + ": truncated at byte offset " + std::to_string(img.size()) +
                        " (want " + std::to_string(want_img) + " bytes)");
    }
    if (lbl.size() != 8 + static_cast<size_t>(n)) {
        throw DataError(lbl_name + ": truncated at byte offset " + std::to_string(lbl.size()));
    }

    Dataset ds;
    ds.split = split;
    ds.n_classes = 10;
    ds.images = Tensor({n, 1, h, w});
    ds.labels.resize(n);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * h * w; ++i) {
        ds.images.data[i] = img[16 + i] / 255.0;
    }
    for (int i = 0; i < n; ++i) {
        if (lbl[8 + i] > 9) throw DataError(lbl_name + ": label out of range at sample " + std::to_string(i));
        ds.labels[i] = lbl[8 + i];
    }
    ds.checksums[img_name] = bytes_hash(img);
    ds.checksums[lbl_name] = bytes_hash(lbl);
    return ds;
}

Dataset load_cifar10(const std::filesystem::path& dir, const std::string& split) {
    std::vector<std::string> files;
    if (split == "train") {
        for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    } else if (split == "test") {
        files.push_back("test_batch.bin");
    } else {
        throw ConfigError("load_cifar10: split must be train|test");
    }

    constexpr size_t kRecord = 3073;
    std::vector<std::vector<unsigned char>> blobs;
    size_t total = 0;
    for (const auto& f : files) {
        blobs.push_back(read_all(dir / f));
        if (blobs.back().size() % kRecord != 0) {
            throw DataError(f + ": file length " + std::to_string(blobs.back().size()) +
                            " is not a multiple of 3073");
        }
        total += blobs.back().size() / kRecord;
    }

    Dataset ds;
    ds.split = split;
    ds.n_classes = 10;
    ds.images = Tensor({static_cast<int>(total), 3, 32, 32});
    ds.labels.resize(total);
    size_t sample = 0;
    for (size_t bi = 0; bi < blobs.size(); ++bi) {
        const auto& blob = blobs[bi];
        ds.checksums[files[bi]] = bytes_hash(blob);
        for (size_t rec = 0; rec < blob.size() / kRecord; ++rec, ++sample) {
            const unsigned char* p = &blob[rec * kRecord];
            if (p[0] > 9) {
                throw DataError(files[bi] + ": label out of range at byte offset " +
                                std::to_string(rec * kRecord));
            }
            ds.labels[sample] = p[0];
            double* dst = &ds.images.data[sample * 3072];
            for (int i = 0; i < 3072; ++i) dst[i] = p[1 + i] / 255.0;
        }
    }
    return ds;
}

std::vector<std::vector<int>> batches(const Dataset& ds, int batch_size, std::uint64_t seed,
                                      bool shuffle) {
    if (batch_size < 1) throw ConfigError("batches: batch size must be positive");
    if (batch_size > ds.size()) throw ConfigError("batches: batch size exceeds dataset size");
    std::vector<int> order(ds.size());
    for (int i = 0; i < ds.size(); ++i) order[i] = i;
    if (shuffle) {
        RngStream stream = RngStream::derive(seed, "shuffle");
        for (int i = ds.size() - 1; i > 0; --i) {
            const int j = static_cast<int>(stream.next_u64() % static_cast<std::uint64_t>(i + 1));
            std::swap(order[i], order[j]);
        }
    }
    std::vector<std::vector<int>> out;
    for (int begin = 0; begin < ds.size(); begin += batch_size) {
        const int end = std::min(begin + batch_size, ds.size());
        out.emplace_back(order.begin() + begin, order.begin() + end);
    }
    return out;
}

std::pair<Tensor, std::vector<int>> gather(const Dataset& ds, const std::vector<int>& indices) {
    Dataset sub = ds.select(indices);
    return {std::move(sub.images), std::move(sub.labels)};
}

} // namespace cimsim
