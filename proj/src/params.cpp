#include "sdcot/params.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace sdcot {

namespace {

const char* kStoreMagic = "PARAMSTORE";
const char* kStoreVersion = "v1";

char hex_digit(unsigned v) { return v < 10 ? static_cast<char>('0' + v) : static_cast<char>('a' + v - 10); }

unsigned hex_value(char c) {
  if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
  if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
  if (c >= 'A' && c <= 'F') return static_cast<unsigned>(c - 'A' + 10);
  throw std::runtime_error("param load: bad hex digit");
}

void append_double_hex(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof(bits));
  for (int shift = 60; shift >= 0; shift -= 4) {
    out.push_back(hex_digit(static_cast<unsigned>((bits >> shift) & 0xF)));
  }
}

double parse_double_hex(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 16; ++i) bits = (bits << 4) | hex_value(p[i]);
  double d;
  std::memcpy(&d, &bits, sizeof(d));
  return d;
}

}  // namespace

Tensor& ParamStore::create(const std::string& name, Shape shape, std::vector<double> values) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw std::invalid_argument("param name must be non-empty and whitespace-free: '" + name + "'");
  }
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor t = Tensor::from_values(std::move(shape), std::move(values), true);
  auto [it, ok] = params_.emplace(name, std::move(t));
  (void)ok;
  return it->second;
}

Tensor& ParamStore::replace(const std::string& name, Tensor t) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("no such parameter: " + name);
  it->second = std::move(t);
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("no such parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("no such parameter: " + name);
  return it->second;
}

bool ParamStore::contains(const std::string& name) const { return params_.count(name) > 0; }

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

void ParamStore::freeze_all() {
  for (auto& [k, t] : params_) t.set_requires_grad(false);
}

bool ParamStore::all_frozen() const {
  for (const auto& [k, t] : params_) {
    if (t.requires_grad()) return false;
  }
  return true;
}

void ParamStore::zero_grads() {
  for (auto& [k, t] : params_) t.zero_grad();
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [k, t] : params_) n += t.numel();
  return n;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [k, t] : params_) {
    Tensor copy = Tensor::from_values(t.shape(), t.values(), t.requires_grad());
    out.params_.emplace(k, std::move(copy));
  }
  return out;
}

void ParamStore::save(std::ostream& os) const {
  os << kStoreMagic << " " << kStoreVersion << " " << params_.size() << "\n";
  for (const auto& [name, t] : params_) {
    os << name << " ";
    const Shape& s = t.shape();
    if (s.empty()) {
      os << "-";  // scalar marker
    } else {
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
      }
    }
    os << " ";
    std::string hex;
    hex.reserve(t.values().size() * 16);
    for (double d : t.values()) append_double_hex(hex, d);
    os << hex << "\n";
  }
}

ParamStore ParamStore::load(std::istream& is) {
  std::string magic, version;
  std::size_t count = 0;
  if (!(is >> magic >> version >> count) || magic != kStoreMagic) {
    throw std::runtime_error("param load: bad header");
  }
  if (version != kStoreVersion) throw std::runtime_error("param load: unsupported version " + version);
  ParamStore out;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name, shape_csv, hex;
    if (!(is >> name >> shape_csv >> hex)) throw std::runtime_error("param load: truncated file");
    Shape shape;
    if (shape_csv != "-") {
      std::stringstream ss(shape_csv);
      std::string tok;
      while (std::getline(ss, tok, ',')) shape.push_back(std::stoi(tok));
    }
    const std::int64_t n = shape_numel(shape);
    if (hex.size() != static_cast<std::size_t>(n) * 16) {
      throw std::runtime_error("param load: value count mismatch for " + name);
    }
    std::vector<double> values(n);
    for (std::int64_t j = 0; j < n; ++j) values[j] = parse_double_hex(hex.data() + j * 16);
    out.create(name, std::move(shape), std::move(values));
  }
  return out;
}

bool bitwise_equal(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (ia->second.shape() != ib->second.shape()) return false;
    const auto& va = ia->second.values();
    const auto& vb = ib->second.values();
    if (std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

void AdamState::step(ParamStore& params) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (auto& [name, t] : params) {
    if (!t.requires_grad()) continue;
    if (!t.grad_allocated()) {
      throw std::runtime_error("adam: missing gradient for trainable parameter " + name);
    }
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) m.assign(t.numel(), 0.0);
    if (v.empty()) v.assign(t.numel(), 0.0);
    if (static_cast<std::int64_t>(m.size()) != t.numel()) {
      throw std::runtime_error("adam: moment buffer shape drift for " + name);
    }
    auto& w = t.mutable_values();
    auto& g = t.mutable_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      g[i] = 0.0;
    }
  }
}

void ema_update(ParamStore& teacher, const ParamStore& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("ema_update: alpha must be in [0, 1]");
  }
  if (teacher.size() != student.size()) {
    throw std::runtime_error("ema_update: parameter sets differ in size");
  }
  auto it = teacher.begin();
  auto is = student.begin();
  for (; it != teacher.end(); ++it, ++is) {
    if (it->first != is->first) {
      throw std::runtime_error("ema_update: parameter name mismatch: " + it->first + " vs " +
                               is->first);
    }
    if (it->second.shape() != is->second.shape()) {
      throw std::runtime_error("ema_update: shape mismatch for " + it->first);
    }
    auto& tv = it->second.mutable_values();
    const auto& sv = is->second.values();
    for (std::size_t i = 0; i < tv.size(); ++i) {
      tv[i] = alpha * tv[i] + (1.0 - alpha) * sv[i];
    }
  }
}

double grad_check(const std::function<Tensor(ParamStore&)>& fn, ParamStore& point, double step) {
  point.zero_grads();
  Tensor loss = fn(point);
  if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: non-finite loss");
  loss.backward();

  std::map<std::string, std::vector<double>> analytic;
  for (const auto& [name, t] : point) {
    if (t.requires_grad()) analytic[name] = t.grad();
  }

  double max_err = 0.0;
  for (auto& [name, t] : point) {
    if (!t.requires_grad()) continue;
    auto& w = point.at(name).mutable_values();
    const auto& a = analytic[name];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + step;
      const double fp = fn(point).item();
      w[i] = orig - step;
      const double fm = fn(point).item();
      w[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("grad_check: non-finite evaluation at perturbed point");
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::fabs(a[i] - numeric) / std::max(1.0, std::fabs(a[i]));
      max_err = std::max(max_err, err);
    }
  }
  point.zero_grads();
  return max_err;
}

}  // namespace sdcot
