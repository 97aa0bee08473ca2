#include "cacom/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "cacom/bytes.hpp"

namespace cacom::ad {

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  ByteWriter w;
  w.text("CACM");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.text(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.f32(v);
  }
  return w.take();
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.text(4) != "CACM") throw std::runtime_error("checkpoint: bad magic");
  if (auto v = r.u32(); v != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(v));
  const auto count = r.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor nt;
    nt.name = r.text(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    std::vector<float> data(numel_of(shape));
    for (auto& v : data) v = r.f32();
    nt.tensor = Tensor::constant(std::move(shape), std::move(data));
    out.push_back(std::move(nt));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace cacom::ad
