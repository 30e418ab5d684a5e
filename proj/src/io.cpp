#include "cjade/io.hpp"

#include <cstring>
#include <fstream>

namespace cjade::io {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_i32(std::vector<std::uint8_t>& out, std::int32_t v) {
    put_u32(out, static_cast<std::uint32_t>(v));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) put_i32(out, d);
    for (float v : t.data) put_f32(out, v);
}

struct Cursor {
    const std::uint8_t* p;
    std::size_t left;

    void need(std::size_t n) {
        if (left < n) throw Truncated("weights file ends inside a record");
    }
    std::uint8_t u8() {
        need(1);
        --left;
        return *p++;
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
        p += 2;
        left -= 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        p += 4;
        left -= 4;
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    Tensor tensor() {
        const int rank = u8();
        if (rank < 1 || rank > 8) throw Malformed("tensor rank " + std::to_string(rank));
        std::vector<int> dims(rank);
        std::int64_t numel = 1;
        for (int i = 0; i < rank; ++i) {
            dims[i] = i32();
            if (dims[i] < 1 || dims[i] > (1 << 24)) throw Malformed("tensor dim " + std::to_string(dims[i]));
            numel *= dims[i];
            if (numel > (std::int64_t(1) << 28)) throw Malformed("tensor too large");
        }
        need(static_cast<std::size_t>(numel) * 4);
        Tensor t(dims);
        for (std::int64_t i = 0; i < numel; ++i) t[i] = f32();
        return t;
    }
};

} // namespace

std::vector<std::uint8_t> serialize_weights(nn::Network& net, const std::string& meta_json) {
    std::vector<std::uint8_t> out;
    out.push_back('C');
    out.push_back('J');
    out.push_back('W');
    out.push_back('1');
    put_u16(out, kWeightsVersion);
    put_u32(out, static_cast<std::uint32_t>(meta_json.size()));
    out.insert(out.end(), meta_json.begin(), meta_json.end());
    put_u32(out, static_cast<std::uint32_t>(net.specs.size()));
    for (std::size_t i = 0; i < net.specs.size(); ++i) {
        const auto& spec = net.specs[i];
        out.push_back(static_cast<std::uint8_t>(spec.kind));
        out.push_back(static_cast<std::uint8_t>(spec.args.size()));
        for (auto a : spec.args) put_i32(out, a);
        std::vector<nn::ParamRef<float>> ps;
        net.layers[i]->collect_params(ps);
        out.push_back(static_cast<std::uint8_t>(ps.size()));
        for (auto& p : ps) put_tensor(out, *p.value);
        std::vector<Tensor*> bufs;
        net.layers[i]->collect_buffers(bufs);
        out.push_back(static_cast<std::uint8_t>(bufs.size()));
        for (auto* b : bufs) put_tensor(out, *b);
    }
    put_u32(out, crc32_ieee(out.data(), out.size()));
    return out;
}

LoadedWeights parse_weights(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4) throw Truncated("file shorter than the magic");
    if (std::memcmp(bytes.data(), "CJW1", 4) != 0) throw BadMagic("not a weights file");

    // structural walk first so a short file reads as truncation, then the
    // checksum so a flipped payload byte reads as corruption
    Cursor c{bytes.data() + 4, bytes.size() - 4};
    const std::uint16_t version = c.u16();
    if (version != kWeightsVersion)
        throw BadVersion("weights format version " + std::to_string(version) + ", expected " +
                         std::to_string(kWeightsVersion));
    const std::uint32_t meta_len = c.u32();
    c.need(meta_len);
    LoadedWeights w;
    w.meta_json.assign(reinterpret_cast<const char*>(c.p), meta_len);
    c.p += meta_len;
    c.left -= meta_len;

    const std::uint32_t layer_count = c.u32();
    if (layer_count > 4096) throw Malformed("layer count " + std::to_string(layer_count));
    for (std::uint32_t i = 0; i < layer_count; ++i) {
        nn::LayerSpec spec;
        spec.kind = static_cast<nn::LayerKind>(c.u8());
        const int argc = c.u8();
        for (int a = 0; a < argc; ++a) spec.args.push_back(c.i32());
        w.specs.push_back(spec);
        const int np = c.u8();
        std::vector<Tensor> ps;
        for (int p = 0; p < np; ++p) ps.push_back(c.tensor());
        w.params.push_back(std::move(ps));
        const int nb = c.u8();
        std::vector<Tensor> bs;
        for (int b = 0; b < nb; ++b) bs.push_back(c.tensor());
        w.buffers.push_back(std::move(bs));
    }
    if (c.left < 4) throw Truncated("weights file ends inside the checksum");
    if (c.left > 4) throw Malformed("trailing bytes after the checksum");

    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
    if (crc32_ieee(bytes.data(), body) != stored)
        throw ChecksumMismatch("weights checksum does not match");
    return w;
}

void apply_weights(nn::Network& net, const LoadedWeights& w) {
    if (net.specs.size() != w.specs.size()) throw Malformed("layer count differs from the spec list");
    for (std::size_t i = 0; i < net.specs.size(); ++i) {
        if (!(net.specs[i] == w.specs[i])) throw Malformed("layer " + std::to_string(i) + " spec differs");
        std::vector<nn::ParamRef<float>> ps;
        net.layers[i]->collect_params(ps);
        if (ps.size() != w.params[i].size())
            throw Malformed("layer " + std::to_string(i) + " parameter count differs");
        for (std::size_t p = 0; p < ps.size(); ++p) {
            if (!ps[p].value->same_shape(w.params[i][p]))
                throw Malformed("layer " + std::to_string(i) + " parameter shape differs");
            ps[p].value->data = w.params[i][p].data;
        }
        std::vector<Tensor*> bufs;
        net.layers[i]->collect_buffers(bufs);
        if (bufs.size() != w.buffers[i].size())
            throw Malformed("layer " + std::to_string(i) + " buffer count differs");
        for (std::size_t b = 0; b < bufs.size(); ++b) {
            if (!bufs[b]->same_shape(w.buffers[i][b]))
                throw Malformed("layer " + std::to_string(i) + " buffer shape differs");
            bufs[b]->data = w.buffers[i][b].data;
        }
    }
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw WeightsError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw WeightsError("short write to " + path);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw WeightsError("cannot open " + path);
    const std::streamsize size = f.tellg();
    f.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw WeightsError("short read from " + path);
    return bytes;
}

} // namespace cjade::io
