#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cimsim/tensor.hpp"

namespace cimsim {

struct Dataset {
    Tensor images; // [N, C, H, W], values in [0,1]
    std::vector<int> labels;
    int n_classes = 10;
    std::string split;
    /// FNV-1a hash of each source file's raw bytes, keyed by filename.
    std::map<std::string, std::uint64_t> checksums;

    int size() const { return images.shape.empty() ? 0 : images.shape[0]; }

    /// First `n` samples as a new dataset (0 keeps everything).
    Dataset head(int n) const;
    Dataset select(const std::vector<int>& indices) const;
};

/// Parses the IDX files (train-images-idx3-ubyte etc). Big-endian headers,
/// magic 0x00000803 for images and 0x00000801 for labels; pixels scaled by
/// 1/255. Malformed files raise DataError with the offending byte offset.
Dataset load_mnist(const std::filesystem::path& dir, const std::string& split);

/// Parses the CIFAR-10 binary batches (data_batch_1..5.bin / test_batch.bin):
/// 3073-byte records, one label byte then 3072 channel-major pixels.
Dataset load_cifar10(const std::filesystem::path& dir, const std::string& split);

/// Deterministic batch index sequence for one epoch. shuffle=false keeps
/// dataset order; otherwise a seeded Fisher-Yates permutation. Every sample
/// appears exactly once; the last batch may be short.
std::vector<std::vector<int>> batches(const Dataset& ds, int batch_size, std::uint64_t seed,
                                      bool shuffle);

/// Gathers one batch into a [n, C, H, W] tensor plus its labels.
std::pair<Tensor, std::vector<int>> gather(const Dataset& ds, const std::vector<int>& indices);

} // namespace cimsim
