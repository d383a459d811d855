#include "mimforge/grad_suite.hpp"

#include <functional>
#include <numeric>

#include "mimforge/clip.hpp"
#include "mimforge/ops.hpp"
#include "mimforge/prng.hpp"
#include "mimforge/vit.hpp"

namespace mimforge {

namespace {

using Inputs = std::vector<TensorD>;
using OpFn = std::function<TensorD(const Inputs&)>;

struct Case {
  Inputs inputs;
  std::vector<std::string> names;
  OpFn f;
};

using Builder = std::function<Case(Prng&)>;

TensorD rnd(Shape shape, Prng& rng, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal() * scale;
  return TensorD::from_vector(std::move(shape), std::move(v));
}

std::int64_t ext(Prng& rng, std::int64_t lo = 1, std::int64_t hi = 8) { return rng.uniform_int(lo, hi); }

std::vector<std::int64_t> ids(Prng& rng, std::int64_t count, std::int64_t bound) {
  std::vector<std::int64_t> out(static_cast<std::size_t>(count));
  for (auto& v : out) v = rng.uniform_int(0, bound - 1);
  return out;
}

TensorD project(const TensorD& y, std::uint64_t seed) {
  if (y.rank() == 0) return y;
  Prng rng(seed, fnv1a64("projection"));
  return ops::sum(ops::mul(y, rnd(y.shape(), rng)));
}

const std::vector<std::pair<std::string, Builder>>& builders() {
  static const std::vector<std::pair<std::string, Builder>> table = {
      {"matmul",
       [](Prng& r) {
         auto m = ext(r), k = ext(r), n = ext(r);
         return Case{{rnd({m, k}, r), rnd({k, n}, r)}, {"a", "b"}, [](const Inputs& x) { return ops::matmul(x[0], x[1]); }};
       }},
      {"linear",
       [](Prng& r) {
         auto m = ext(r), k = ext(r), n = ext(r);
         return Case{{rnd({m, k}, r), rnd({k, n}, r), rnd({n}, r)},
                     {"x", "weight", "bias"},
                     [](const Inputs& x) { return ops::linear(x[0], x[1], x[2]); }};
       }},
      {"transpose2d",
       [](Prng& r) {
         return Case{{rnd({ext(r), ext(r)}, r)}, {"x"}, [](const Inputs& x) { return ops::transpose2d(x[0]); }};
       }},
      {"add",
       [](Prng& r) {
         Shape s{ext(r), ext(r)};
         return Case{{rnd(s, r), rnd(s, r)}, {"a", "b"}, [](const Inputs& x) { return ops::add(x[0], x[1]); }};
       }},
      {"add_rowwise",
       [](Prng& r) {
         auto m = ext(r), n = ext(r);
         return Case{{rnd({m, n}, r), rnd({n}, r)}, {"x", "bias"}, [](const Inputs& x) { return ops::add_rowwise(x[0], x[1]); }};
       }},
      {"add_tiled",
       [](Prng& r) {
         auto p = ext(r, 1, 4), reps = ext(r, 1, 3), n = ext(r);
         return Case{{rnd({p * reps, n}, r), rnd({p, n}, r)}, {"x", "table"},
                     [](const Inputs& x) { return ops::add_tiled(x[0], x[1]); }};
       }},
      {"mul",
       [](Prng& r) {
         Shape s{ext(r), ext(r)};
         return Case{{rnd(s, r), rnd(s, r)}, {"a", "b"}, [](const Inputs& x) { return ops::mul(x[0], x[1]); }};
       }},
      {"scale",
       [](Prng& r) {
         const double f = r.uniform(-2.0, 2.0);
         return Case{{rnd({ext(r), ext(r)}, r)}, {"x"}, [f](const Inputs& x) { return ops::scale(x[0], f); }};
       }},
      {"scale_by",
       [](Prng& r) {
         return Case{{rnd({ext(r), ext(r)}, r), rnd({1}, r)}, {"x", "factor"},
                     [](const Inputs& x) { return ops::scale_by(x[0], x[1]); }};
       }},
      {"scale_rows",
       [](Prng& r) {
         auto m = ext(r);
         std::vector<double> f(static_cast<std::size_t>(m));
         for (auto& v : f) v = r.uniform(-2.0, 2.0);
         return Case{{rnd({m, ext(r)}, r)}, {"x"},
                     [f](const Inputs& x) { return ops::scale_rows(x[0], std::span<const double>(f)); }};
       }},
      {"exp", [](Prng& r) { return Case{{rnd({ext(r), ext(r)}, r)}, {"x"}, [](const Inputs& x) { return ops::exp(x[0]); }}; }},
      {"gelu",
       [](Prng& r) { return Case{{rnd({ext(r), ext(r)}, r, 2.0)}, {"x"}, [](const Inputs& x) { return ops::gelu(x[0]); }}; }},
      {"reshape",
       [](Prng& r) {
         auto m = ext(r), n = ext(r);
         return Case{{rnd({m, n}, r)}, {"x"}, [n, m](const Inputs& x) { return ops::reshape(x[0], {n, m}); }};
       }},
      {"slice_rows",
       [](Prng& r) {
         auto m = ext(r, 2, 8);
         auto b = r.uniform_int(0, m - 1), e = r.uniform_int(b + 1, m);
         return Case{{rnd({m, ext(r)}, r)}, {"x"}, [b, e](const Inputs& x) { return ops::slice_rows(x[0], b, e); }};
       }},
      {"concat_rows",
       [](Prng& r) {
         auto n = ext(r);
         return Case{{rnd({ext(r), n}, r), rnd({ext(r), n}, r)}, {"first", "second"}, [](const Inputs& x) {
                       const std::vector<TensorD> parts{x[0], x[1]};
                       return ops::concat_rows(std::span<const TensorD>(parts));
                     }};
       }},
      {"gather_rows",
       [](Prng& r) {
         auto m = ext(r);
         auto rows = ids(r, ext(r), m);  // duplicates accumulate
         return Case{{rnd({m, ext(r)}, r)}, {"x"},
                     [rows](const Inputs& x) { return ops::gather_rows(x[0], std::span<const std::int64_t>(rows)); }};
       }},
      {"replace_rows",
       [](Prng& r) {
         auto m = ext(r), n = ext(r);
         std::vector<std::uint8_t> flags(static_cast<std::size_t>(m));
         for (auto& f : flags) f = r.bernoulli(0.5) ? 1 : 0;
         flags[0] = 1;
         return Case{{rnd({m, n}, r), rnd({n}, r)}, {"x", "token"}, [flags](const Inputs& x) {
                       return ops::replace_rows(x[0], std::span<const std::uint8_t>(flags), x[1]);
                     }};
       }},
      {"prepend_token",
       [](Prng& r) {
         auto b = ext(r, 1, 3), s = ext(r, 1, 4), n = ext(r);
         return Case{{rnd({b * s, n}, r), rnd({n}, r)}, {"x", "token"},
                     [b](const Inputs& x) { return ops::prepend_token(x[0], x[1], b); }};
       }},
      {"mean_pool",
       [](Prng& r) {
         auto b = ext(r, 1, 3), s = ext(r, 2, 5), n = ext(r);
         auto begin = r.uniform_int(0, s - 1);
         return Case{{rnd({b * s, n}, r)}, {"x"}, [b, begin](const Inputs& x) { return ops::mean_pool(x[0], b, begin); }};
       }},
      {"embedding_lookup",
       [](Prng& r) {
         auto v = ext(r);
         auto t = ids(r, ext(r), v);
         return Case{{rnd({v, ext(r)}, r)}, {"table"},
                     [t](const Inputs& x) { return ops::embedding_lookup(x[0], std::span<const std::int64_t>(t)); }};
       }},
      {"patchify",
       [](Prng& r) {
         auto p = ext(r, 1, 2), g = ext(r, 1, 3), b = ext(r, 1, 2);
         return Case{{rnd({b, 3, p * g, p * g}, r)}, {"images"}, [p](const Inputs& x) { return ops::patchify(x[0], p); }};
       }},
      {"softmax_lastdim",
       [](Prng& r) {
         return Case{{rnd({ext(r), ext(r)}, r, 2.0)}, {"x"}, [](const Inputs& x) { return ops::softmax_lastdim(x[0]); }};
       }},
      {"layernorm",
       [](Prng& r) {
         auto m = ext(r), n = ext(r, 2, 8);
         return Case{{rnd({m, n}, r), rnd({n}, r), rnd({n}, r)},
                     {"x", "gamma", "beta"},
                     [](const Inputs& x) { return ops::layernorm(x[0], x[1], x[2]); }};
       }},
      {"l2_normalize_lastdim",
       [](Prng& r) {
         return Case{{rnd({ext(r), ext(r)}, r)}, {"x"}, [](const Inputs& x) { return ops::l2_normalize_lastdim(x[0]); }};
       }},
      {"cosine_rows",
       [](Prng& r) {
         Shape s{ext(r), ext(r)};
         return Case{{rnd(s, r), rnd(s, r)}, {"a", "b"}, [](const Inputs& x) { return ops::cosine_rows(x[0], x[1]); }};
       }},
      {"sum", [](Prng& r) { return Case{{rnd({ext(r), ext(r)}, r)}, {"x"}, [](const Inputs& x) { return ops::sum(x[0]); }}; }},
      {"mean", [](Prng& r) { return Case{{rnd({ext(r), ext(r)}, r)}, {"x"}, [](const Inputs& x) { return ops::mean(x[0]); }}; }},
      {"cross_entropy",
       [](Prng& r) {
         auto n = ext(r), c = ext(r, 2, 8);
         auto y = ids(r, n, c);
         return Case{{rnd({n, c}, r, 2.0)}, {"logits"},
                     [y](const Inputs& x) { return ops::cross_entropy(x[0], std::span<const std::int64_t>(y)); }};
       }},
      {"dropout",
       [](Prng& r) {
         const auto seed = r.next_u64();
         return Case{{rnd({ext(r), ext(r)}, r)}, {"x"}, [seed](const Inputs& x) {
                       Prng d(seed);
                       return ops::dropout(x[0], 0.3, d, true);
                     }};
       }},
      {"attention",
       [](Prng& r) {
         auto b = ext(r, 1, 2), s = ext(r, 1, 4), heads = ext(r, 1, 2), hd = ext(r, 1, 3);
         return Case{{rnd({b * s, 3 * heads * hd}, r)}, {"qkv"},
                     [b, heads](const Inputs& x) { return ops::attention(x[0], b, heads); }};
       }},
      {"stochastic_depth",
       [](Prng& r) {
         auto b = ext(r, 2, 4), s = ext(r, 1, 3), n = ext(r);
         const auto seed = r.next_u64();
         return Case{{rnd({b * s, n}, r), rnd({b * s, n}, r)}, {"block", "residual"}, [b, seed](const Inputs& x) {
                       Prng d(seed);
                       return stochastic_depth(x[0], x[1], 0.4, b, &d, true);
                     }};
       }},
      {"infonce",
       [](Prng& r) {
         auto b = ext(r, 2, 6), d = ext(r, 2, 8);
         return Case{{rnd({b, d}, r), rnd({b, d}, r), rnd({1}, r, 0.5)},
                     {"image_emb", "text_emb", "log_temp"},
                     [](const Inputs& x) { return infonce_log_temp(x[0], x[1], x[2]); }};
       }},
  };
  return table;
}

}  // namespace

std::vector<std::string> op_gradcheck_names() {
  std::vector<std::string> out;
  for (const auto& [name, b] : builders()) out.push_back(name);
  return out;
}

std::vector<OpGradcheck> op_gradcheck_suite(std::uint64_t seed, int trials, double tol, double h) {
  std::vector<OpGradcheck> results;
  for (const auto& [name, build] : builders()) {
    Prng op_rng = Prng(seed, fnv1a64("op-gradcheck")).split(name);
    for (int t = 0; t < trials; ++t) {
      Prng r = op_rng.split(static_cast<std::uint64_t>(t));
      const Case c = build(r);
      const auto proj_seed = r.next_u64();
      for (std::size_t i = 0; i < c.inputs.size(); ++i) {
        auto f = [&, i](const TensorD& xi) {
          Inputs in = c.inputs;
          in[i] = xi;
          return project(c.f(in), proj_seed);
        };
        results.push_back({name, c.names[i], shape_str(c.inputs[i].shape()), gradcheck(f, c.inputs[i], h, tol)});
      }
    }
  }
  return results;
}

}  // namespace mimforge
