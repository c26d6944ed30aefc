#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "sanas/autodiff.hpp"
#include "sanas/checkpoint.hpp"
#include "sanas/errors.hpp"
#include "sanas/tensor.hpp"

using namespace sanas;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t{std::move(shape)};
  for (double& v : t.data) v = scale * rng.gaussian();
  return t;
}

}  // namespace

TEST_CASE("matmul identity and dot product") {
  Tape tape;
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {1, 2, 3, 4});
  Var out = tape.matmul(tape.constant(eye), tape.constant(a));
  CHECK(out.value().data == a.data);

  Tape tape2;
  Tensor row({1, 2}, {1, 2});
  Tensor col({2, 1}, {3, 4});
  CHECK(tape2.matmul(tape2.constant(row), tape2.constant(col)).value().data[0] == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(42);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tape tape;
  Var out = tape.matmul(tape.constant(a), tape.constant(b));
  for (size_t i = 0; i < 3; ++i)
    for (size_t j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (size_t k = 0; k < 4; ++k) acc += a.data[i * 4 + k] * b.data[k * 2 + j];
      CHECK(std::abs(out.value().data[i * 2 + j] - acc) < 1e-12);
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Tensor a({2, 3});
  Tensor b({2, 2});
  try {
    tape.matmul(tape.constant(a), tape.constant(b));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
    CHECK(std::string(e.what()).find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("softmax rows: symmetry, large logits, naive oracle") {
  Tape tape;
  Tensor x({1, 2}, {0.0, 0.0});
  Var s = tape.softmax_rows(tape.constant(x));
  CHECK(s.value().data[0] == doctest::Approx(0.5).epsilon(1e-15));

  Tape tape2;
  Tensor big({1, 2}, {1000.0, 0.0});
  Var s2 = tape2.softmax_rows(tape2.constant(big));
  CHECK(std::abs(s2.value().data[0] - 1.0) < 1e-12);
  CHECK(std::abs(s2.value().data[1]) < 1e-12);

  Rng rng(7);
  Tensor r = random_tensor({2, 3}, rng);
  Tape tape3;
  Var s3 = tape3.softmax_rows(tape3.constant(r));
  for (size_t row = 0; row < 2; ++row) {
    double total = 0.0, naive_total = 0.0;
    for (size_t c = 0; c < 3; ++c) naive_total += std::exp(r.data[row * 3 + c]);
    for (size_t c = 0; c < 3; ++c) {
      const double naive = std::exp(r.data[row * 3 + c]) / naive_total;
      CHECK(std::abs(s3.value().data[row * 3 + c] - naive) < 1e-12);
      total += s3.value().data[row * 3 + c];
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("sort descending with permutation") {
  Tensor x({3}, {1, 3, 2});
  SortResult r = sort_desc_with_permutation(x);
  CHECK(r.sorted.data == std::vector<double>{3, 2, 1});
  CHECK(r.perm == std::vector<size_t>{1, 2, 0});

  Tensor ties({4}, {5, 5, 5, 5});
  SortResult rt = sort_desc_with_permutation(ties);
  CHECK(rt.perm == std::vector<size_t>{0, 1, 2, 3});

  Rng rng(11);
  Tensor big = random_tensor({100}, rng);
  SortResult rb = sort_desc_with_permutation(big);
  Tensor recovered({100});
  for (size_t i = 0; i < 100; ++i) recovered.data[rb.perm[i]] = rb.sorted.data[i];
  CHECK(recovered.data == big.data);
}

TEST_CASE("backward: sum gives ones, sum of squares gives 2w") {
  Tensor w({4}, {1.0, -2.0, 3.0, 0.5});
  {
    Tape tape;
    Var loss = tape.sum(tape.leaf(w));
    tape.backward(loss);
    for (double g : w.grad) CHECK(g == 1.0);
  }
  w.zero_grad();
  {
    Tape tape;
    Var lw = tape.leaf(w);
    Var loss = tape.sum(tape.mul(lw, lw));
    tape.backward(loss);
    for (size_t i = 0; i < 4; ++i) CHECK(w.grad[i] == 2.0 * w.data[i]);
  }
}

TEST_CASE("backward on non-scalar is a contract error") {
  Tensor w({2}, {1.0, 2.0});
  Tape tape;
  Var v = tape.leaf(w);
  CHECK_THROWS_AS(tape.backward(v), ContractError);
}

TEST_CASE("gradient accumulation across two uses is exact") {
  Rng rng(3);
  Tensor x = random_tensor({5}, rng);

  Tensor fx = x, gx = x;
  double grad_f[5], grad_g[5];
  {
    Tape tape;
    Var loss = tape.sum(tape.mul(tape.leaf(fx), tape.leaf(fx)));
    tape.backward(loss);
    for (size_t i = 0; i < 5; ++i) grad_f[i] = fx.grad[i];
  }
  {
    Tape tape;
    Var loss = tape.scale(tape.sum(tape.leaf(gx)), 3.0);
    tape.backward(loss);
    for (size_t i = 0; i < 5; ++i) grad_g[i] = gx.grad[i];
  }
  // y = f(x) + g(x) in one tape
  {
    Tape tape;
    Var lx = tape.leaf(x);
    Var loss = tape.add(tape.sum(tape.mul(lx, lx)), tape.scale(tape.sum(lx), 3.0));
    tape.backward(loss);
    for (size_t i = 0; i < 5; ++i) CHECK(x.grad[i] == grad_f[i] + grad_g[i]);
  }
}

TEST_CASE("composite conv-relu-mean gradient matches finite differences") {
  Rng rng(1234);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5);

  auto loss_value = [&](const Tensor& weights) {
    Tape tape;
    Tensor wc = weights;
    Var out = tape.mean(tape.relu(tape.conv2d(tape.constant(x), tape.constant(wc), 1, 1)));
    return out.value().data[0];
  };

  Tape tape;
  Var loss = tape.mean(tape.relu(tape.conv2d(tape.constant(x), tape.leaf(w), 1, 1)));
  tape.backward(loss);

  const double h = 1e-5;
  double max_rel = 0.0;
  for (size_t i = 0; i < w.numel(); ++i) {
    Tensor wp = w, wm = w;
    wp.data[i] += h;
    wm.data[i] -= h;
    const double fd = (loss_value(wp) - loss_value(wm)) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(w.grad[i]), 1e-8});
    max_rel = std::max(max_rel, std::abs(fd - w.grad[i]) / denom);
  }
  CHECK(max_rel < 1e-5);
}

TEST_CASE("rng determinism: same seed, same stream") {
  Rng a(999), b(999);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng g1(5), g2(5);
  for (int i = 0; i < 50; ++i) {
    const double x = g1.gaussian(), y = g2.gaussian();
    CHECK(std::memcmp(&x, &y, sizeof x) == 0);
  }
  // forked streams differ from the parent stream
  Rng base(1);
  Rng f1 = base.fork(1), f2 = base.fork(2);
  CHECK(f1.next_u64() != f2.next_u64());
}

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(21);
  std::map<std::string, Tensor> tensors;
  tensors.emplace("alpha", random_tensor({7}, rng));
  tensors.emplace("block.weights", random_tensor({2, 3, 3, 3}, rng));
  tensors.emplace("scalar", Tensor({1}, {-0.0}));

  const std::string path = "test_ckpt_roundtrip.bin";
  save_checkpoint(path, tensors);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == tensors.size());
  for (const auto& [name, t] : tensors) {
    REQUIRE(loaded.count(name) == 1);
    CHECK(loaded.at(name).shape == t.shape);
    for (size_t i = 0; i < t.numel(); ++i)
      CHECK(std::memcmp(&loaded.at(name).data[i], &t.data[i], sizeof(double)) == 0);
  }
  // second save of the loaded map produces identical bytes
  const std::string path2 = "test_ckpt_roundtrip2.bin";
  save_checkpoint(path2, loaded);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("checkpoint load failures are io errors") {
  CHECK_THROWS_AS(load_checkpoint("does_not_exist.bin"), IoError);
  const std::string path = "test_ckpt_badmagic.bin";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTSANAS";
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
}
