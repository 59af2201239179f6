#pragma once

// Tensor files. A single record is:
//
//   "MCT1"                                  4 magic bytes
//   "<dtype> <ndim> <d0> <d1> ... <dk>\n"   one UTF-8 header line
//   raw little-endian floats                numel * width bytes
//
// dtype is "f32" or "f64". A checkpoint container is a text line
// "MCTS <count>\n" followed by <count> sections, each a name line and an
// embedded MCT1 record.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mcdm/tensor.hpp"

namespace mcdm {

inline void write_tensor(std::ostream& os, const Tensor& t) {
    bool f32 = precision_mode() == Precision::f32;
    os.write("MCT1", 4);
    os << (f32 ? "f32" : "f64") << ' ' << t.ndim();
    for (int64_t d : t.shape()) os << ' ' << d;
    os << '\n';
    if (f32) {
        std::vector<float> buf(t.data().begin(), t.data().end());
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    }
}

inline Tensor read_tensor(std::istream& is, const std::string& where) {
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "MCT1")
        throw IoError(where + ": bad magic (expected MCT1)");
    std::string header;
    if (!std::getline(is, header)) throw IoError(where + ": missing tensor header");
    std::istringstream hs(header);
    std::string dtype;
    int64_t ndim = 0;
    if (!(hs >> dtype >> ndim) || (dtype != "f32" && dtype != "f64") || ndim < 1)
        throw IoError(where + ": malformed tensor header '" + header + "'");
    Shape shape(static_cast<size_t>(ndim));
    for (auto& d : shape)
        if (!(hs >> d) || d < 1) throw IoError(where + ": malformed shape in header");
    int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    if (dtype == "f32") {
        std::vector<float> buf(static_cast<size_t>(n));
        if (!is.read(reinterpret_cast<char*>(buf.data()),
                     static_cast<std::streamsize>(buf.size() * sizeof(float))))
            throw IoError(where + ": truncated tensor data");
        for (size_t i = 0; i < buf.size(); ++i) data[i] = static_cast<double>(buf[i]);
    } else {
        if (!is.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(data.size() * sizeof(double))))
            throw IoError(where + ": truncated tensor data");
    }
    // bypass quantization: loads reproduce stored bytes exactly
    Tensor t;
    t.node_ = std::make_shared<detail::Node>(std::move(shape), std::move(data));
    return t;
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(path + ": cannot open for writing");
    write_tensor(os, t);
    if (!os) throw IoError(path + ": write failed");
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path + ": cannot open");
    return read_tensor(is, path);
}

inline void save_tensors(const std::string& path,
                         const std::vector<std::pair<std::string, Tensor>>& named) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(path + ": cannot open for writing");
    os << "MCTS " << named.size() << '\n';
    for (const auto& [name, t] : named) {
        os << name << '\n';
        write_tensor(os, t);
    }
    if (!os) throw IoError(path + ": write failed");
}

inline std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path + ": cannot open");
    std::string head;
    if (!std::getline(is, head) || head.rfind("MCTS ", 0) != 0)
        throw IoError(path + ": bad container magic (expected MCTS)");
    size_t count = std::stoul(head.substr(5));
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        std::string name;
        if (!std::getline(is, name)) throw IoError(path + ": truncated container");
        out.emplace_back(name, read_tensor(is, path + ":" + name));
    }
    return out;
}

}  // namespace mcdm
