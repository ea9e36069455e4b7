#include "vb/nn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace vb::nn {

namespace {

using nlohmann::json;

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& meta_json) {
    json meta = meta_json.empty() ? json::object() : json::parse(meta_json);
    json header;
    header["meta"] = meta;
    json plist = json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params.at(i);
        json e;
        e["name"] = p.name;
        e["shape"] = p.shape;
        e["count"] = p.value.size();
        e["offset"] = offset;
        offset += p.value.size();
        plist.push_back(std::move(e));
    }
    header["params"] = std::move(plist);
    const std::string htext = header.dump();

    std::string data = "VBC1";
    const std::uint32_t hlen = static_cast<std::uint32_t>(htext.size());
    for (int i = 0; i < 4; ++i) data.push_back(static_cast<char>((hlen >> (8 * i)) & 0xff));
    data += htext;
    data.reserve(data.size() + offset * 8);
    for (std::size_t i = 0; i < params.size(); ++i)
        for (double v : params.at(i).value)
            put_u64_le(data, std::bit_cast<std::uint64_t>(v));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("short write to checkpoint " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() < 8 || data.compare(0, 4, "VBC1") != 0)
        throw std::runtime_error(path + ": not a checkpoint file");
    const auto* p = reinterpret_cast<const unsigned char*>(data.data());
    std::uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<std::uint32_t>(p[4 + i]) << (8 * i);
    if (data.size() < 8 + static_cast<std::size_t>(hlen))
        throw std::runtime_error(path + ": truncated checkpoint header");
    json header = json::parse(data.substr(8, hlen));

    LoadedCheckpoint out;
    out.meta_json = header.at("meta").dump();
    const std::size_t payload_base = 8 + hlen;
    for (const auto& e : header.at("params")) {
        const std::string name = e.at("name").get<std::string>();
        const Shape shape = e.at("shape").get<Shape>();
        const std::uint64_t count = e.at("count").get<std::uint64_t>();
        const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
        const std::size_t begin = payload_base + offset * 8;
        if (begin + count * 8 > data.size())
            throw std::runtime_error(path + ": truncated checkpoint payload for " + name);
        std::vector<double> value(count);
        const auto* q = reinterpret_cast<const unsigned char*>(data.data()) + begin;
        for (auto& v : value) {
            v = std::bit_cast<double>(get_u64_le(q));
            q += 8;
        }
        out.params.add(name, shape, std::move(value));
    }
    return out;
}

} // namespace vb::nn
