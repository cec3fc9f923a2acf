// SPDX-License-Identifier: Apache-2.0
#include "fmattn/lm/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fmattn::lm {

namespace {

constexpr const char* magic = "fmattn-checkpoint 1";

std::string shape_text(const core::Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? "x" : "") + std::to_string(shape[i]);
    return out;
}

core::Shape parse_shape(const std::string& text) {
    core::Shape shape;
    std::istringstream is(text);
    std::string part;
    while (std::getline(is, part, 'x')) shape.push_back(std::stoull(part));
    return shape;
}

void put_f32(std::string& out, float x) {
    const auto bits = std::bit_cast<std::uint32_t>(x);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

float get_f32(const char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
    return std::bit_cast<float>(bits);
}

[[noreturn]] void malformed(const std::string& path, const std::string& what) {
    throw std::runtime_error("checkpoint '" + path + "': " + what);
}

std::string expect_line(std::istream& in, const std::string& path) {
    std::string line;
    if (!std::getline(in, line)) malformed(path, "truncated header");
    return line;
}

std::size_t counted_section(std::istream& in, const std::string& path, const std::string& keyword) {
    const std::string line = expect_line(in, path);
    std::istringstream is(line);
    std::string word;
    std::size_t count = 0;
    if (!(is >> word >> count) || word != keyword) malformed(path, "expected '" + keyword + " <count>', got '" + line + "'");
    return count;
}

struct Parsed {
    CheckpointInfo info;
    std::string data;
};

Parsed parse(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint '" + path + "': cannot open");
    if (expect_line(in, path) != magic) malformed(path, "bad magic line");
    Parsed parsed;
    std::string config_text;
    const std::size_t config_lines = counted_section(in, path, "config");
    for (std::size_t i = 0; i < config_lines; ++i) config_text += expect_line(in, path) + "\n";
    parsed.info.config = parse_model_config(config_text);

    const std::size_t entries = counted_section(in, path, "manifest");
    std::uint64_t expected_offset = 0;
    for (std::size_t i = 0; i < entries; ++i) {
        std::istringstream is(expect_line(in, path));
        ManifestEntry e;
        std::string shape;
        if (!(is >> e.name >> shape >> e.offset >> e.count)) malformed(path, "bad manifest entry " + std::to_string(i));
        e.shape = parse_shape(shape);
        if (core::extent_product(e.shape) != e.count) malformed(path, "count does not match shape for " + e.name);
        if (e.offset != expected_offset) malformed(path, "manifest offsets overlap or leave gaps at " + e.name);
        expected_offset += 4 * e.count;
        parsed.info.manifest.push_back(std::move(e));
    }
    const std::size_t data_bytes = counted_section(in, path, "data");
    if (data_bytes != expected_offset) malformed(path, "data size does not match the manifest");
    parsed.data.resize(data_bytes);
    if (!in.read(parsed.data.data(), static_cast<std::streamsize>(data_bytes))) malformed(path, "truncated data");
    if (in.peek() != std::char_traits<char>::eof()) malformed(path, "trailing bytes after data");
    return parsed;
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
    const std::string config = model.config().to_text();
    std::size_t config_lines = 0;
    for (char c : config) config_lines += c == '\n';

    std::ostringstream header;
    header << magic << "\nconfig " << config_lines << "\n" << config;
    const auto params = model.parameters();
    header << "manifest " << params.size() << "\n";
    std::string data;
    for (const auto* p : params) {
        header << p->name << " " << shape_text(p->value.shape()) << " " << data.size() << " " << p->value.size() << "\n";
        for (T x : p->value.data()) put_f32(data, static_cast<float>(x));
    }
    header << "data " << data.size() << "\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint '" + path + "': cannot write");
    const std::string text = header.str();
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("checkpoint '" + path + "': write failed");
}

CheckpointInfo read_checkpoint_info(const std::string& path) { return parse(path).info; }

Model<float> load_checkpoint(const std::string& path) {
    const Parsed parsed = parse(path);
    Model<float> model(parsed.info.config, 0);
    std::map<std::string, const ManifestEntry*> by_name;
    for (const auto& e : parsed.info.manifest) by_name[e.name] = &e;
    const auto params = model.parameters();
    if (params.size() != by_name.size()) malformed(path, "parameter count does not match the model");
    for (auto* p : params) {
        const auto it = by_name.find(p->name);
        if (it == by_name.end()) malformed(path, "missing parameter " + p->name);
        const ManifestEntry& e = *it->second;
        if (e.shape != p->value.shape()) malformed(path, "shape mismatch for " + p->name);
        auto values = p->value.data();
        for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_f32(parsed.data.data() + e.offset + 4 * i);
    }
    return model;
}

template void save_checkpoint(const Model<float>&, const std::string&);
template void save_checkpoint(const Model<double>&, const std::string&);

}  // namespace fmattn::lm
