#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "trajprune/denoiser.hpp"
#include "trajprune/errors.hpp"
#include "trajprune/textio.hpp"

namespace trajprune {

namespace {

constexpr const char* kMagic = "toy-denoiser-checkpoint v1";

struct TensorEntry {
    std::string name;
    long rows = 0;
    long cols = 0;
    long offset = 0;  // bytes from payload start
};

void append_f32_le(std::string& out, double v) {
    float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

double read_f32_le(const std::string& payload, std::size_t byte_off) {
    std::uint32_t bits = static_cast<unsigned char>(payload[byte_off]) |
                         (static_cast<std::uint32_t>(
                              static_cast<unsigned char>(payload[byte_off + 1]))
                          << 8) |
                         (static_cast<std::uint32_t>(
                              static_cast<unsigned char>(payload[byte_off + 2]))
                          << 16) |
                         (static_cast<std::uint32_t>(
                              static_cast<unsigned char>(payload[byte_off + 3]))
                          << 24);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return static_cast<double>(f);
}

}  // namespace

void save_checkpoint(const DenoiserModel& model, const std::string& path) {
    std::ostringstream header;
    const auto& c = model.cfg;
    header << kMagic << '\n'
           << "image_size " << c.image_size << '\n'
           << "channels " << c.channels << '\n'
           << "patch " << c.patch << '\n'
           << "d_model " << c.d_model << '\n'
           << "n_heads " << c.n_heads << '\n'
           << "n_blocks " << c.n_blocks << '\n'
           << "mlp_hidden " << c.mlp_hidden << '\n'
           << "n_classes " << c.n_classes << '\n';

    std::string payload;
    visit_params(model, [&](const std::string& name, const auto& tensor) {
        header << "tensor " << name << ' ' << tensor.rows() << ' ' << tensor.cols()
               << ' ' << payload.size() << '\n';
        for (Eigen::Index r = 0; r < tensor.rows(); ++r)
            for (Eigen::Index cc = 0; cc < tensor.cols(); ++cc)
                append_f32_le(payload, tensor(r, cc));
    });
    header << "payload " << payload.size() << '\n';
    spit_file(path, header.str() + payload);
}

DenoiserModel load_checkpoint(const std::string& path) {
    std::string blob = slurp_file(path);
    std::size_t pos = 0;
    auto next_line = [&]() {
        auto nl = blob.find('\n', pos);
        if (nl == std::string::npos)
            throw ParamError("checkpoint is truncated: " + path);
        std::string line = blob.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };

    if (next_line() != kMagic)
        throw ParamError("not a denoiser checkpoint: " + path);

    DenoiserConfig cfg;
    std::vector<TensorEntry> manifest;
    long payload_bytes = -1;
    while (payload_bytes < 0) {
        std::istringstream ls(next_line());
        std::string key;
        ls >> key;
        if (key == "tensor") {
            TensorEntry e;
            ls >> e.name >> e.rows >> e.cols >> e.offset;
            if (ls.fail()) throw ParamError("malformed tensor entry in " + path);
            manifest.push_back(e);
        } else if (key == "payload") {
            ls >> payload_bytes;
            if (ls.fail() || payload_bytes < 0)
                throw ParamError("malformed payload size in " + path);
        } else {
            long v = 0;
            ls >> v;
            if (ls.fail())
                throw ParamError("malformed header line '" + key + "' in " + path);
            if (key == "image_size") cfg.image_size = static_cast<int>(v);
            else if (key == "channels") cfg.channels = static_cast<int>(v);
            else if (key == "patch") cfg.patch = static_cast<int>(v);
            else if (key == "d_model") cfg.d_model = static_cast<int>(v);
            else if (key == "n_heads") cfg.n_heads = static_cast<int>(v);
            else if (key == "n_blocks") cfg.n_blocks = static_cast<int>(v);
            else if (key == "mlp_hidden") cfg.mlp_hidden = static_cast<int>(v);
            else if (key == "n_classes") cfg.n_classes = static_cast<int>(v);
            else throw ParamError("unknown header key '" + key + "' in " + path);
        }
    }

    std::string payload = blob.substr(pos);
    if (static_cast<long>(payload.size()) != payload_bytes)
        throw ParamError("payload size mismatch in " + path + ": header says " +
                         std::to_string(payload_bytes) + " bytes, file has " +
                         std::to_string(payload.size()));

    std::map<std::string, TensorEntry> by_name;
    for (const auto& e : manifest) by_name[e.name] = e;

    DenoiserModel model = DenoiserModel::zeros(cfg);
    std::size_t used = 0;
    visit_params(model, [&](const std::string& name, auto& tensor) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw ParamError("checkpoint is missing tensor '" + name + "'");
        const TensorEntry& e = it->second;
        if (e.rows != tensor.rows() || e.cols != tensor.cols())
            throw ParamError("tensor '" + name + "' has shape " +
                             std::to_string(e.rows) + "x" + std::to_string(e.cols) +
                             ", expected " + std::to_string(tensor.rows()) + "x" +
                             std::to_string(tensor.cols()));
        std::size_t need = static_cast<std::size_t>(e.offset) +
                           4u * static_cast<std::size_t>(e.rows * e.cols);
        if (need > payload.size())
            throw ParamError("tensor '" + name + "' runs past payload end");
        std::size_t off = static_cast<std::size_t>(e.offset);
        for (Eigen::Index r = 0; r < tensor.rows(); ++r)
            for (Eigen::Index cc = 0; cc < tensor.cols(); ++cc) {
                tensor(r, cc) = read_f32_le(payload, off);
                off += 4;
            }
        used += 1;
    });
    if (used != by_name.size())
        throw ParamError("checkpoint holds " + std::to_string(by_name.size()) +
                         " tensors, model expects " + std::to_string(used));
    return model;
}

}  // namespace trajprune
