#include "s2sd/heads.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "io_util.hpp"
#include "s2sd/errors.hpp"
#include "s2sd/rng.hpp"

namespace s2sd {

void FeatureBatch::validate() const {
  if (maps.rank() != 4) throw ShapeError("FeatureBatch: maps must be B x H x W x C, got " + shape_string(maps.shape()));
  if (labels.size() != size()) {
    throw ShapeError("FeatureBatch: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(size()) + " samples");
  }
  if (size() < 2) throw ShapeError("FeatureBatch: need at least 2 samples");
}

FeatureBatch FeatureBatch::select(std::span<const std::size_t> indices) const {
  const std::size_t stride = height() * width() * channels();
  std::vector<double> data;
  data.reserve(indices.size() * stride);
  std::vector<Label> picked;
  picked.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw ShapeError("FeatureBatch::select: index out of range");
    auto src = maps.data().subspan(i * stride, stride);
    data.insert(data.end(), src.begin(), src.end());
    picked.push_back(labels[i]);
  }
  return FeatureBatch{Tensor({indices.size(), height(), width(), channels()}, std::move(data)),
                      std::move(picked)};
}

Tensor pool(const FeatureBatch& features, PoolingMode mode) {
  features.validate();
  const std::size_t b = features.size(), c = features.channels();
  const std::size_t cells = features.height() * features.width();
  const bool with_max = mode == PoolingMode::avg_plus_max;
  Tensor out({b, with_max ? 2 * c : c});
  const auto data = features.maps.data();
  for (std::size_t s = 0; s < b; ++s) {
    const double* base = data.data() + s * cells * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double total = 0.0, peak = base[ch];
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const double v = base[cell * c + ch];
        total += v;
        peak = std::max(peak, v);
      }
      out(s, ch) = total / static_cast<double>(cells);
      if (with_max) out(s, c + ch) = peak;
    }
  }
  return out;
}

std::size_t HeadParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void HeadParams::validate() const {
  if (layers.empty() || layers.size() > 3) {
    throw ShapeError("head '" + branch_id + "': depth must be 1..3, got " + std::to_string(layers.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.weight.rank() != 2 || l.bias.size() != l.weight.rows()) {
      throw ShapeError("head '" + branch_id + "': layer " + std::to_string(i) + " weight " +
                       shape_string(l.weight.shape()) + " bias " + shape_string(l.bias.shape()));
    }
    if (i > 0 && layers[i - 1].weight.rows() != l.weight.cols()) {
      throw ShapeError("head '" + branch_id + "': layer " + std::to_string(i) + " does not chain");
    }
  }
}

HeadParams init_head(std::size_t in_dim, std::size_t out_dim, std::size_t depth,
                     std::size_t hidden_dim, std::uint64_t seed, std::string branch_id) {
  if (in_dim == 0 || out_dim == 0) throw ShapeError("init_head: dimensions must be positive");
  if (depth < 1 || depth > 3) throw ShapeError("init_head: depth must be 1..3");
  if (depth > 1 && hidden_dim == 0) throw ShapeError("init_head: hidden width must be positive");
  Rng rng(seed);
  HeadParams head;
  head.branch_id = std::move(branch_id);
  std::size_t fan_in = in_dim;
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t fan_out = l + 1 == depth ? out_dim : hidden_dim;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor w({fan_out, fan_in});
    for (auto& v : w.data()) v = rng.uniform(-bound, bound);
    head.layers.push_back({std::move(w), Tensor({1, fan_out}, 0.0)});
    fan_in = fan_out;
  }
  return head;
}

HeadVars bind_head(Graph& graph, const HeadParams& head, bool trainable) {
  HeadVars vars;
  for (const auto& l : head.layers) {
    vars.weights.push_back(trainable ? graph.parameter(l.weight) : graph.constant(l.weight));
    vars.biases.push_back(trainable ? graph.parameter(l.bias) : graph.constant(l.bias));
  }
  return vars;
}

Var embed(Var pooled, const HeadVars& head) {
  if (head.weights.empty()) throw ShapeError("embed: head has no layers");
  if (pooled.cols() != head.weights.front().cols()) {
    throw ShapeError("embed: input " + shape_string(pooled.shape()) + " does not match head input " +
                     std::to_string(head.weights.front().cols()));
  }
  Var x = pooled;
  for (std::size_t l = 0; l < head.weights.size(); ++l) {
    x = add_row(matmul_nt(x, head.weights[l]), head.biases[l]);
    if (l + 1 < head.weights.size()) x = relu(x);
  }
  return l2_normalize_rows(x);
}

EmbeddingBatch embed(const Tensor& pooled, const HeadParams& head) {
  Graph g;
  Var out = embed(g.constant(pooled), bind_head(g, head, false));
  return {out.value(), head.branch_id, true};
}

EmbeddingBatch normalize_features(const Tensor& pooled) {
  Graph g;
  Var out = l2_normalize_rows(g.constant(pooled));
  return {out.value(), "features", true};
}

void save_heads(const std::filesystem::path& path, std::span<const HeadParams> heads) {
  std::vector<char> bytes;
  for (const auto& h : heads) {
    h.validate();
    if (h.branch_id.empty() || h.branch_id.find_first_of(" \n\t") != std::string::npos) {
      throw IoError("checkpoint: branch id '" + h.branch_id + "' must be a non-empty token");
    }
    std::ostringstream header;
    header << "head " << h.branch_id << " in=" << h.in_dim() << " out=" << h.out_dim()
           << " depth=" << h.depth() << '\n';
    const std::string line = header.str();
    bytes.insert(bytes.end(), line.begin(), line.end());
    for (const auto& l : h.layers) {
      detail::put_le(bytes, static_cast<std::uint32_t>(l.weight.rows()));
      detail::put_le(bytes, static_cast<std::uint32_t>(l.weight.cols()));
      for (double v : l.weight.data()) detail::put_le(bytes, v);
      for (double v : l.bias.data()) detail::put_le(bytes, v);
    }
  }
  detail::write_file_atomic(path, std::string_view(bytes.data(), bytes.size()));
}

std::vector<HeadParams> load_heads(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  std::vector<HeadParams> heads;
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) {
      throw IoError("checkpoint " + path.string() + ": truncated (need " + std::to_string(n) +
                    " bytes at offset " + std::to_string(pos) + ")");
    }
  };
  while (pos < bytes.size()) {
    const auto nl = std::find(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), '\n');
    if (nl == bytes.end()) throw IoError("checkpoint " + path.string() + ": missing header line");
    std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(pos), nl);
    pos = static_cast<std::size_t>(nl - bytes.begin()) + 1;

    std::istringstream is(line);
    std::string tag, id, in_tok, out_tok, depth_tok;
    is >> tag >> id >> in_tok >> out_tok >> depth_tok;
    std::size_t in = 0, out = 0, depth = 0;
    if (tag != "head" || std::sscanf(in_tok.c_str(), "in=%zu", &in) != 1 ||
        std::sscanf(out_tok.c_str(), "out=%zu", &out) != 1 ||
        std::sscanf(depth_tok.c_str(), "depth=%zu", &depth) != 1 || depth < 1 || depth > 3) {
      throw IoError("checkpoint " + path.string() + ": malformed header '" + line + "'");
    }
    HeadParams head;
    head.branch_id = id;
    for (std::size_t l = 0; l < depth; ++l) {
      need(8);
      const auto rows = detail::get_le<std::uint32_t>(bytes.data() + pos);
      const auto cols = detail::get_le<std::uint32_t>(bytes.data() + pos + 4);
      pos += 8;
      if (rows == 0 || cols == 0) throw IoError("checkpoint " + path.string() + ": zero layer extent");
      const std::size_t count = std::size_t{rows} * cols;
      need((count + rows) * 8);
      std::vector<double> w(count), b(rows);
      for (auto& v : w) { v = detail::get_le<double>(bytes.data() + pos); pos += 8; }
      for (auto& v : b) { v = detail::get_le<double>(bytes.data() + pos); pos += 8; }
      head.layers.push_back({Tensor({rows, cols}, std::move(w)), Tensor({1, rows}, std::move(b))});
    }
    head.validate();
    if (head.in_dim() != in || head.out_dim() != out) {
      throw IoError("checkpoint " + path.string() + ": header dims disagree with layer records for '" + id + "'");
    }
    heads.push_back(std::move(head));
  }
  return heads;
}

}  // namespace s2sd
