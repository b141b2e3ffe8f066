#include <cassert>
#include <cmath>
#include <cstdio>

#include "cvloc/gradcheck.hpp"
#include "cvloc/linalg.hpp"
#include "cvloc/ops.hpp"

using namespace cvloc;

int main() {
  // softmax shift invariance + sum
  Tensor x = Tensor::from({2}, {0.0, std::log(3.0)});
  Tensor y = softmax_axis(x, 0);
  assert(std::abs(y.at(0) - 0.25) < 1e-12 && std::abs(y.at(1) - 0.75) < 1e-12);

  // matmul identity
  Rng rng(1);
  Tensor a = Tensor::randn({4, 4}, rng);
  Tensor i4 = Tensor::eye(4);
  Tensor ai = matmul(a, i4);
  for (std::size_t k = 0; k < 16; ++k) assert(ai.at(k) == a.at(k));

  // grad of sum(x^2) = 2x
  std::vector<Tensor> ins{Tensor::randn({3, 5}, rng)};
  double err = grad_check([](const std::vector<Tensor>& in) { return sum_all(mul(in[0], in[0])); }, ins, 1e-4);
  printf("gradcheck sum(x^2): %.3e\n", err);
  assert(err < 1e-8);

  // eig of diag(1,2)
  Tensor d = Tensor::from({2, 2}, {1, 0, 0, 2});
  auto [vals, vecs] = sym_eig(d);
  assert(std::abs(vals.at(0) - 1) < 1e-12 && std::abs(vals.at(1) - 2) < 1e-12);

  // eig backward vs FD on a random symmetric 4x4 (weighted eigval sum + vec entry)
  Tensor base = Tensor::randn({4, 4}, rng);
  std::vector<double> sym(16);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) sym[r * 4 + c] = 0.5 * (base.at(r * 4 + c) + base.at(c * 4 + r));
  std::vector<Tensor> eins{Tensor::from({4, 4}, sym)};
  double eerr = grad_check(
      [](const std::vector<Tensor>& in) {
        auto [ev, evec] = sym_eig(in[0]);
        Tensor w = Tensor::from({4}, {0.3, -0.7, 1.1, 0.2});
        return add(dot(ev, w), mean_all(evec));
      },
      eins, 1e-5);
  printf("gradcheck sym_eig: %.3e\n", eerr);
  assert(eerr < 1e-5);

  // svd reconstruct
  Tensor ms = Tensor::randn({4, 4}, rng);
  auto svd = svd_small(ms);
  Tensor rec = matmul(svd.u, matmul(scale_rows(Tensor::eye(4), svd.s), svd.vt));
  for (std::size_t k = 0; k < 16; ++k) assert(std::abs(rec.at(k) - ms.at(k)) < 1e-8);

  // double backward is a contract violation
  Tensor p = Tensor::randn({3}, rng);
  p.set_requires_grad(true);
  Tensor loss = sum_all(mul(p, p));
  backward(loss);
  bool threw = false;
  try {
    backward(loss);
  } catch (const ContractError&) {
    threw = true;
  }
  assert(threw);

  printf("smoke ok\n");
  return 0;
}
