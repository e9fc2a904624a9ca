#include "tsprobe/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "tsprobe/data.hpp"

namespace tsprobe {

namespace {

constexpr char kMagic[8] = {'T', 'S', 'P', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void write_pod(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  return v;
}

struct Header {
  std::uint32_t scalar_bytes = 0;
  nlohmann::json body;
};

Header read_header(std::istream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError(path.string() + ": not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kVersion) throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  Header h;
  h.scalar_bytes = read_pod<std::uint32_t>(in);
  if (h.scalar_bytes != 4 && h.scalar_bytes != 8) throw DataError(path.string() + ": bad scalar width");
  const auto len = read_pod<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path.string() + ": truncated header");
  h.body = nlohmann::json::parse(text);
  return h;
}

template <typename From, typename T>
void read_values(std::istream& in, Tensor<T>& t) {
  if constexpr (std::is_same_v<From, T>) {
    in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else {
    std::vector<From> tmp(t.size());
    in.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * sizeof(From)));
    for (std::size_t i = 0; i < tmp.size(); ++i) t[i] = static_cast<T>(tmp[i]);
  }
}

}  // namespace

template <typename T>
const Tensor<T>& TensorBundle<T>::at(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("checkpoint has no tensor '" + name + "'");
  return it->second;
}

template <typename T>
void save_bundle(const std::filesystem::path& path, const nlohmann::json& meta,
                 const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
  nlohmann::json body;
  body["meta"] = meta;
  body["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : tensors) body["tensors"].push_back({{"name", name}, {"shape", t->shape()}});
  const std::string text = body.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, kVersion);
    write_pod<std::uint32_t>(out, sizeof(T));
    write_pod<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors) {
      out.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(t->size() * sizeof(T)));
    }
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
TensorBundle<T> load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  const Header h = read_header(in, path);
  TensorBundle<T> bundle;
  bundle.meta = h.body.at("meta");
  for (const auto& entry : h.body.at("tensors")) {
    Tensor<T> t(entry.at("shape").get<Shape>());
    if (h.scalar_bytes == 4) {
      read_values<float>(in, t);
    } else {
      read_values<double>(in, t);
    }
    if (!in) throw DataError(path.string() + ": truncated tensor data");
    bundle.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return bundle;
}

nlohmann::json read_bundle_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_header(in, path).body.at("meta");
}

template struct TensorBundle<float>;
template struct TensorBundle<double>;
template void save_bundle<float>(const std::filesystem::path&, const nlohmann::json&,
                                 const std::vector<std::pair<std::string, const Tensor<float>*>>&);
template void save_bundle<double>(const std::filesystem::path&, const nlohmann::json&,
                                  const std::vector<std::pair<std::string, const Tensor<double>*>>&);
template TensorBundle<float> load_bundle<float>(const std::filesystem::path&);
template TensorBundle<double> load_bundle<double>(const std::filesystem::path&);

}  // namespace tsprobe
