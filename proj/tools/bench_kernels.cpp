// Serial vs OpenMP timing for matmul and a forward/backward batch.
//   bench_kernels [--size N] [--reps R] [--batch B]

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <vector>

#include "dyrex/data.hpp"
#include "dyrex/model.hpp"
#include "dyrex/numkit.hpp"
#include "dyrex/parallel.hpp"

using namespace dyrex;
using Clock = std::chrono::steady_clock;

template <typename F>
double time_ms(int reps, F&& f) {
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) f();
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / reps;
}

int main(int argc, char** argv) {
  CLI::App app{"kernel benchmarks"};
  std::size_t n = 256;
  int reps = 5;
  std::size_t batch = 12;
  app.add_option("--size", n, "square matmul size")->capture_default_str();
  app.add_option("--reps", reps, "repetitions")->capture_default_str();
  app.add_option("--batch", batch, "examples per forward/backward batch")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const int threads = parallel::thread_count();
  std::printf("threads: %d\n", threads);

  Rng rng(1);
  const Matrix a = rng.normal_matrix(n, n, 1.0);
  const Matrix b = rng.normal_matrix(n, n, 1.0);
  Matrix ref, par;
  const double t_serial = time_ms(reps, [&] { ref = serial::matmul(a, b); });
  const double t_par = time_ms(reps, [&] { par = matmul(a, b); });
  std::printf("matmul %zux%zu  serial %.2f ms  parallel %.2f ms  speedup %.2fx  bitwise %s\n", n,
              n, t_serial, t_par, t_serial / t_par, ref == par ? "equal" : "DIFFERENT");

  SynthSpec spec;
  const auto examples = generate_synthetic(spec, batch);
  const Vocab vocab = build_vocab(examples);
  ModelConfig mc;
  mc.encoder.vocab_size = vocab.size();
  mc.encoder.dim = 64;
  mc.encoder.num_heads = 4;
  mc.encoder.num_layers = 2;
  mc.head.num_layers = 2;
  mc.head.num_heads = 4;
  DyrexModel model(mc);
  std::vector<EncodedExample> encoded;
  for (const auto& ex : examples) encoded.push_back(encode_example(ex, vocab, mc.encoder.max_len));

  auto run_batch = [&](int nthreads) {
    parallel::set_thread_count(nthreads);
    std::vector<GradBuffer> bufs(encoded.size(), model.params().make_grad_buffer());
    return time_ms(reps, [&] {
#pragma omp parallel for schedule(static) num_threads(parallel::thread_count())
      for (long i = 0; i < static_cast<long>(encoded.size()); ++i) {
        bufs[i].zero();
        model.forward_backward(encoded[i].input, encoded[i].gold, 1.0, bufs[i]);
      }
    });
  };
  const double b1 = run_batch(1);
  const double bn = run_batch(threads);
  std::printf("forward+backward batch of %zu  1 thread %.2f ms  %d threads %.2f ms  speedup %.2fx\n",
              batch, b1, threads, bn, b1 / bn);
  return 0;
}
