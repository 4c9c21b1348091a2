#include "gradfit/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gradfit/errors.hpp"

namespace gradfit {

std::string format_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool DomainBox::contains(std::span<const double> t, double slack) const {
  if (static_cast<int>(t.size()) != d()) return false;
  for (int j = 0; j < d(); ++j) {
    const double w = width(j);
    const double eps = slack * (std::fabs(w) + 1.0);
    if (t[static_cast<std::size_t>(j)] < lo[static_cast<std::size_t>(j)] - eps ||
        t[static_cast<std::size_t>(j)] > hi[static_cast<std::size_t>(j)] + eps) {
      return false;
    }
  }
  return true;
}

void DomainBox::validate() const {
  if (lo.size() != hi.size()) throw ConfigError("domain box: lo/hi mismatch");
  for (int j = 0; j < d(); ++j) {
    if (!(width(j) > 0.0)) {
      throw ConfigError("domain box: hi must exceed lo in every coordinate");
    }
  }
}

Eigen::Index MixedDataset::rows() const {
  Eigen::Index n = func.size();
  for (const auto& g : grads) n += g.size();
  return n;
}

void MixedDataset::validate() const {
  if (d < 1) throw ConfigError("dataset: d must be >= 1");
  if (p() > d) throw ConfigError("dataset: more gradient groups than coordinates");
  if (func.size() == 0) throw ConfigError("dataset: no function observations");
  if (func.t.rows() != func.y.size() || func.t.cols() != d) {
    throw ConfigError("dataset: function group shape mismatch");
  }
  box.validate();
  if (box.d() != d) throw ConfigError("dataset: box dimension mismatch");
  auto check_group = [&](const ObsGroup& g, int idx) {
    if (g.size() == 0) {
      throw ConfigError("dataset: gradient group " + std::to_string(idx) +
                        " is empty");
    }
    if (g.t.rows() != g.y.size() || g.t.cols() != d) {
      throw ConfigError("dataset: gradient group shape mismatch");
    }
  };
  for (int j = 0; j < p(); ++j) check_group(grads[static_cast<std::size_t>(j)], j + 1);
  auto check_points = [&](const ObsGroup& g) {
    for (Eigen::Index i = 0; i < g.t.rows(); ++i) {
      Eigen::VectorXd row = g.t.row(i);
      if (!box.contains(std::span<const double>(row.data(),
                                                static_cast<std::size_t>(d)))) {
        throw ConfigError("dataset: design point outside the declared box");
      }
    }
  };
  check_points(func);
  for (const auto& g : grads) check_points(g);
}

void write_dataset_csv(const MixedDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  for (int j = 1; j <= data.d; ++j) out << "t_" << j << ",";
  out << "channel,y\n";
  auto emit = [&](const ObsGroup& g, int channel) {
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      for (int j = 0; j < data.d; ++j) out << format_full(g.t(i, j)) << ",";
      out << channel << "," << format_full(g.y(i)) << "\n";
    }
  };
  emit(data.func, 0);
  for (int j = 0; j < data.p(); ++j) {
    emit(data.grads[static_cast<std::size_t>(j)], j + 1);
  }
  if (!out) throw ConfigError("write failed: " + path);
}

MixedDataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty dataset: " + path);

  // Header: t_1,...,t_d,channel,y
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 3 || header[header.size() - 2] != "channel" ||
      header.back() != "y") {
    throw SchemaError(path + ": header must be t_1..t_d,channel,y");
  }
  const int d = static_cast<int>(header.size()) - 2;
  for (int j = 0; j < d; ++j) {
    if (header[static_cast<std::size_t>(j)] != "t_" + std::to_string(j + 1)) {
      throw SchemaError(path + ": unexpected coordinate column '" +
                        header[static_cast<std::size_t>(j)] + "'");
    }
  }

  struct Raw {
    std::vector<double> t;
    std::vector<double> y;
  };
  std::vector<Raw> channels;
  int max_channel = -1;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> t(static_cast<std::size_t>(d));
    try {
      for (int j = 0; j < d; ++j) {
        if (!std::getline(ss, cell, ',')) throw std::invalid_argument("short row");
        t[static_cast<std::size_t>(j)] = std::stod(cell);
      }
      if (!std::getline(ss, cell, ',')) throw std::invalid_argument("short row");
      const double chd = std::stod(cell);
      const int channel = static_cast<int>(chd);
      if (chd != channel || channel < 0) {
        throw std::invalid_argument("bad channel");
      }
      if (!std::getline(ss, cell, ',')) throw std::invalid_argument("short row");
      const double y = std::stod(cell);
      if (channel > max_channel) {
        max_channel = channel;
        channels.resize(static_cast<std::size_t>(channel) + 1);
      }
      auto& raw = channels[static_cast<std::size_t>(channel)];
      raw.t.insert(raw.t.end(), t.begin(), t.end());
      raw.y.push_back(y);
    } catch (const std::exception& e) {
      throw SchemaError(path + ":" + std::to_string(line_no) +
                        ": malformed row (" + e.what() + ")");
    }
  }
  if (max_channel < 0 || channels[0].y.empty()) {
    throw SchemaError(path + ": no function rows (channel 0)");
  }
  if (max_channel > d) {
    throw SchemaError(path + ": channel index exceeds dimension");
  }

  MixedDataset data;
  data.d = d;
  auto to_group = [&](const Raw& raw) {
    ObsGroup g;
    const auto n = static_cast<Eigen::Index>(raw.y.size());
    g.t.resize(n, d);
    g.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) {
        g.t(i, j) = raw.t[static_cast<std::size_t>(i) * d +
                          static_cast<std::size_t>(j)];
      }
      g.y(i) = raw.y[static_cast<std::size_t>(i)];
    }
    return g;
  };
  data.func = to_group(channels[0]);
  for (int c = 1; c <= max_channel; ++c) {
    if (channels[static_cast<std::size_t>(c)].y.empty()) {
      throw SchemaError(path + ": gradient channel " + std::to_string(c) +
                        " has no rows but higher channels exist");
    }
    data.grads.push_back(to_group(channels[static_cast<std::size_t>(c)]));
  }
  data.box = DomainBox::unit(d);
  return data;
}

}  // namespace gradfit
