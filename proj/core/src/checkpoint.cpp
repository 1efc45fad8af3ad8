#include "asc/checkpoint.hpp"

#include <cstring>
#include <string>

#include "asc/errors.hpp"

namespace asc {

Bytes encode_checkpoint(const ModelConfig& cfg, const TransformerWeights& w) {
    w.validate(cfg);
    ByteWriter out;
    out.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4));
    out.u32(kCheckpointVersion);
    const std::string cfg_json = cfg.to_json();
    out.u64(cfg_json.size());
    out.raw(cfg_json);
    const std::size_t payload_start = out.size();
    w.for_each_tensor([&](std::span<const double> t) {
        for (double v : t) out.f32(static_cast<float>(v));
    });
    const auto payload = std::span<const std::uint8_t>(out.bytes()).subspan(payload_start);
    const std::uint32_t crc = crc32(payload);
    out.u32(crc);
    return std::move(out.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes);
    const auto magic = in.raw(4);
    if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw LoadError("checkpoint: bad magic");
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion)
        throw LoadError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint64_t json_len = in.u64();
    if (json_len > in.remaining()) throw LoadError("checkpoint: config length exceeds file size");
    const auto json_bytes = in.raw(static_cast<std::size_t>(json_len));
    Checkpoint ck;
    ck.config = ModelConfig::from_json(std::string(json_bytes.begin(), json_bytes.end()));
    ck.weights = TransformerWeights::zeros(ck.config);

    const std::size_t n_params = ck.weights.parameter_count();
    if (in.remaining() != n_params * 4 + 4)
        throw LoadError("checkpoint: expected " + std::to_string(n_params * 4 + 4) + " payload bytes, found " +
                        std::to_string(in.remaining()));
    const auto payload = bytes.subspan(in.position(), n_params * 4);
    ck.weights.for_each_tensor([&](std::span<double> t) {
        for (double& v : t) v = static_cast<double>(in.f32());
    });
    const std::uint32_t stored = in.u32();
    if (stored != crc32(payload)) throw LoadError("checkpoint: CRC32 mismatch (file corrupt)");
    ck.weights.validate(ck.config);
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const TransformerWeights& w) {
    write_file(path, encode_checkpoint(cfg, w));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

TransformerWeights round_to_f32(TransformerWeights w) {
    w.for_each_tensor([](std::span<double> t) {
        for (double& v : t) v = static_cast<double>(static_cast<float>(v));
    });
    return w;
}

}  // namespace asc
