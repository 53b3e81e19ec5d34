#include "lsurv/model.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace lsurv {

namespace {

constexpr const char* kMagic = "lsurv-checkpoint";
constexpr int kVersion = 1;

std::string hex(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::hex);
  return std::string(buf, r.ptr);
}

double parse_hex(const std::string& s) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::hex);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::runtime_error("checkpoint: bad number '" + s + "'");
  return v;
}

std::string expect_key(std::istream& is, const std::string& key) {
  std::string k, v;
  if (!(is >> k >> v) || k != key) throw std::runtime_error("checkpoint: expected '" + key + "'");
  return v;
}

std::size_t to_size(const std::string& s) {
  std::size_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::runtime_error("checkpoint: bad count '" + s + "'");
  return v;
}

}  // namespace

SurvivalModel::SurvivalModel(const ModelConfig& config, FeatureSchema schema, DiscretizationGrid grid)
    : config_(config), schema_(std::move(schema)), grid_(grid) {
  if (config.causes < 1) throw std::invalid_argument("model: need at least one cause");
  if (config.horizon < 1) throw std::invalid_argument("model: horizon must be >= 1");
  Rng rng = derive_rng(config.seed, 0x5eed);
  embedding_ = CovariateEmbedding(schema_, config.d_emb, !config.no_cet, store_, rng);
  EncoderConfig ec;
  ec.d_emb = config.d_emb;
  ec.heads = config.heads;
  ec.blocks = config.blocks;
  ec.causal = config.causal;
  ec.factorized = !config.no_fa;
  ec.shared_query = config.shared_query;
  encoder_ = FactorizedEncoder(ec, schema_.size(), store_, rng);
  heads_ = CauseHeads(encoder_.context_dim(), config.causes, store_, rng);
}

Var SurvivalModel::logits(Tape& tape, const Batch& batch, AttentionDump* dump) const {
  if (batch.features != schema_.size())
    throw std::invalid_argument("model: batch has " + std::to_string(batch.features) + " features, expected " +
                                std::to_string(schema_.size()));
  Var z = embedding_.forward(tape, batch);
  Var c = encoder_.forward(z, batch.valid, dump);
  return heads_.decode_logits(c, config_.horizon);
}

Var SurvivalModel::forward(Tape& tape, const Batch& batch, AttentionDump* dump) const {
  return hazards(logits(tape, batch, dump));
}

std::vector<HazardGrid> SurvivalModel::predict(const Batch& batch) const {
  Tape tape;
  const Array lam = forward(tape, batch).value();
  const std::size_t H = config_.horizon, K = config_.causes;
  std::vector<HazardGrid> out;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    Array l({H, K});
    std::copy(lam.data() + b * H * K, lam.data() + (b + 1) * H * K, l.data());
    out.push_back(HazardGrid::from_hazards(std::move(l)));
  }
  return out;
}

std::vector<Array> SurvivalModel::snapshot() const {
  std::vector<Array> v;
  for (const Parameter* p : store_.all()) v.push_back(p->value);
  return v;
}

void SurvivalModel::restore(const std::vector<Array>& values) {
  auto params = store_.all();
  if (values.size() != params.size()) throw std::invalid_argument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (values[i].shape() != params[i]->value.shape())
      throw std::invalid_argument("restore: shape mismatch for " + params[i]->name);
    params[i]->value = values[i];
  }
}

void SurvivalModel::save(std::ostream& os) const {
  const ModelConfig& c = config_;
  os << kMagic << ' ' << kVersion << '\n';
  os << "d_emb " << c.d_emb << "\nheads " << c.heads << "\nblocks " << c.blocks << "\nhorizon " << c.horizon
     << "\ncauses " << c.causes << "\nno_fa " << c.no_fa << "\nno_cet " << c.no_cet << "\ncausal " << c.causal
     << "\nshared_query " << c.shared_query << "\nseed " << c.seed << '\n';
  os << "grid " << hex(grid_.width) << ' ' << grid_.intervals << '\n';
  os << "features " << schema_.size() << '\n';
  for (const FeatureSpec& f : schema_.features())
    os << (f.kind == FeatureKind::Numeric ? "numeric" : "categorical") << ' ' << f.cardinality << ' ' << hex(f.mean)
       << ' ' << hex(f.stddev) << ' ' << f.name << '\n';
  const auto params = store_.all();
  os << "parameters " << params.size() << '\n';
  for (const Parameter* p : params) {
    os << p->name << ' ' << p->value.rank();
    for (std::size_t d : p->value.shape()) os << ' ' << d;
    os << '\n';
    for (std::size_t i = 0; i < p->value.size(); ++i) os << (i ? " " : "") << hex(p->value[i]);
    os << '\n';
  }
  os << "end\n";
}

void SurvivalModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  save(os);
  if (!os) throw std::runtime_error("error writing checkpoint " + path);
}

SurvivalModel SurvivalModel::load(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != kMagic) throw std::runtime_error("checkpoint: not a checkpoint file");
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  ModelConfig c;
  c.d_emb = to_size(expect_key(is, "d_emb"));
  c.heads = to_size(expect_key(is, "heads"));
  c.blocks = to_size(expect_key(is, "blocks"));
  c.horizon = to_size(expect_key(is, "horizon"));
  c.causes = to_size(expect_key(is, "causes"));
  c.no_fa = to_size(expect_key(is, "no_fa")) != 0;
  c.no_cet = to_size(expect_key(is, "no_cet")) != 0;
  c.causal = to_size(expect_key(is, "causal")) != 0;
  c.shared_query = to_size(expect_key(is, "shared_query")) != 0;
  c.seed = to_size(expect_key(is, "seed"));
  std::string w, j;
  if (!(is >> w >> w >> j)) throw std::runtime_error("checkpoint: bad grid");
  DiscretizationGrid grid(parse_hex(w), to_size(j));
  const std::size_t D = to_size(expect_key(is, "features"));
  std::vector<FeatureSpec> specs(D);
  for (FeatureSpec& f : specs) {
    std::string kind, card, mean, sd;
    if (!(is >> kind >> card >> mean >> sd)) throw std::runtime_error("checkpoint: bad feature line");
    f.kind = kind == "numeric" ? FeatureKind::Numeric : FeatureKind::Categorical;
    f.cardinality = to_size(card);
    f.mean = parse_hex(mean);
    f.stddev = parse_hex(sd);
    std::getline(is >> std::ws, f.name);
  }
  SurvivalModel model(c, FeatureSchema(std::move(specs)), grid);
  const std::size_t P = to_size(expect_key(is, "parameters"));
  if (P != model.store_.size())
    throw std::runtime_error("checkpoint: " + std::to_string(P) + " parameters, model has " +
                             std::to_string(model.store_.size()));
  for (std::size_t i = 0; i < P; ++i) {
    std::string name;
    std::size_t rank = 0;
    if (!(is >> name >> rank)) throw std::runtime_error("checkpoint: bad parameter header");
    Shape shape(rank);
    for (std::size_t& d : shape)
      if (!(is >> d)) throw std::runtime_error("checkpoint: bad shape for " + name);
    Parameter* p = model.store_.find(name);
    if (!p || p->value.shape() != shape) throw std::runtime_error("checkpoint: unexpected parameter " + name);
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      std::string v;
      if (!(is >> v)) throw std::runtime_error("checkpoint: truncated values for " + name);
      p->value[k] = parse_hex(v);
    }
  }
  std::string tail;
  if (!(is >> tail) || tail != "end") throw std::runtime_error("checkpoint: missing end marker");
  return model;
}

SurvivalModel SurvivalModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  return load(is);
}

}  // namespace lsurv
