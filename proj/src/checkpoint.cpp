#include "anomseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "anomseg/rng.hpp"

namespace anomseg::train {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'A', 'S', 'E', 'G', 'C', 'K', 'P', '1'};
constexpr uint32_t kVersion = 1;

struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};

// checkpoint entry order: weights, then Adam moments per optimizer group
std::vector<NamedTensor> collect_tensors(const TrainerState& st) {
  std::vector<NamedTensor> out;
  auto named = st.named_params();
  for (auto& [n, v] : named) out.push_back({n, &v->value});

  auto add_moments = [&out](const char* group, optim::Adam& opt,
                            const std::vector<std::pair<std::string, ad::Var>>& names,
                            size_t offset) {
    for (size_t i = 0; i < opt.size(); ++i) {
      out.push_back({std::string("adam.") + group + ".m." + names[offset + i].first, &opt.m(i)});
      out.push_back({std::string("adam.") + group + ".v." + names[offset + i].first, &opt.v(i)});
    }
  };
  // model optimizer covers model.* then projector.* in named order
  add_moments("model", *st.model_opt, named, 0);
  size_t clf_f_off = st.model->params().items.size() + st.projector->params().items.size();
  add_moments("d_f", *st.d_f_opt, named, clf_f_off);
  add_moments("d_o", *st.d_o_opt, named, clf_f_off + st.d_f->params().items.size());
  return out;
}

}  // namespace

void save_checkpoint(const TrainerState& st, const std::filesystem::path& path) {
  auto tensors = collect_tensors(st);
  json jt = json::array();
  size_t payload_count = 0;
  for (const NamedTensor& nt : tensors) {
    jt.push_back(json{{"name", nt.name}, {"shape", nt.tensor->shape()}});
    payload_count += static_cast<size_t>(nt.tensor->numel());
  }
  json header{{"version", kVersion},
              {"iteration", st.iteration},
              {"max_iters", st.max_iters},
              {"in_h", st.net_cfg.in_h},
              {"in_w", st.net_cfg.in_w},
              {"config", st.cfg.serialize()},
              {"opt_t", {{"model", st.model_opt->t()},
                         {"d_f", st.d_f_opt->t()},
                         {"d_o", st.d_o_opt->t()}}},
              {"tensors", jt}};
  std::string hdr = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  uint64_t hlen = hdr.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));

  uint64_t hash = 1469598103934665603ULL;
  for (const NamedTensor& nt : tensors) {
    const char* bytes = reinterpret_cast<const char*>(nt.tensor->data());
    size_t len = static_cast<size_t>(nt.tensor->numel()) * sizeof(double);
    out.write(bytes, static_cast<std::streamsize>(len));
    hash = fnv1a(bytes, len, hash);
  }
  out.write(reinterpret_cast<const char*>(&hash), sizeof(hash));
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

TrainerState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a checkpoint file: " + path.string());
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kVersion)
    throw IoError("checkpoint version mismatch in " + path.string() + ": got " +
                  std::to_string(version) + ", expected " + std::to_string(kVersion));
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hdr(hlen, '\0');
  in.read(hdr.data(), static_cast<std::streamsize>(hlen));
  if (static_cast<uint64_t>(in.gcount()) != hlen)
    throw IoError("truncated checkpoint header: " + path.string());

  json header;
  try {
    header = json::parse(hdr);
  } catch (const std::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }

  // rebuild the state skeleton from the embedded config
  std::string cfg_text = header.at("config").get<std::string>();
  TrainConfig cfg;
  {
    std::istringstream is(cfg_text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      size_t eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      cfg.apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }
  TrainerState st = TrainerState::create(cfg, header.at("in_h").get<int>(),
                                         header.at("in_w").get<int>());
  st.iteration = header.at("iteration").get<long>();
  st.max_iters = header.at("max_iters").get<long>();

  auto tensors = collect_tensors(st);
  const json& jt = header.at("tensors");
  if (jt.size() != tensors.size())
    throw IoError("checkpoint tensor table mismatch in " + path.string());

  uint64_t hash = 1469598103934665603ULL;
  for (size_t i = 0; i < tensors.size(); ++i) {
    const json& entry = jt.at(i);
    if (entry.at("name").get<std::string>() != tensors[i].name)
      throw IoError("checkpoint tensor order mismatch at '" + tensors[i].name + "' in " +
                    path.string());
    std::vector<long> shape = entry.at("shape").get<std::vector<long>>();
    Tensor* dst = const_cast<Tensor*>(tensors[i].tensor);
    if (shape != dst->shape())
      throw IoError("checkpoint tensor shape mismatch at '" + tensors[i].name + "' in " +
                    path.string());
    size_t len = static_cast<size_t>(dst->numel()) * sizeof(double);
    in.read(reinterpret_cast<char*>(dst->data()), static_cast<std::streamsize>(len));
    if (static_cast<size_t>(in.gcount()) != len)
      throw IoError("truncated checkpoint payload: " + path.string());
    hash = fnv1a(dst->data(), len, hash);
  }
  uint64_t stored_hash = 0;
  in.read(reinterpret_cast<char*>(&stored_hash), sizeof(stored_hash));
  if (in.gcount() != sizeof(stored_hash) || stored_hash != hash)
    throw IoError("checkpoint integrity check failed (corrupt file): " + path.string());

  st.model_opt->set_t(header.at("opt_t").at("model").get<long>());
  st.d_f_opt->set_t(header.at("opt_t").at("d_f").get<long>());
  st.d_o_opt->set_t(header.at("opt_t").at("d_o").get<long>());
  return st;
}

}  // namespace anomseg::train
