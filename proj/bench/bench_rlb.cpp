// Request-level batching vs per-candidate scoring on generated desk data.
#include <cstdio>

#include "mixformer/cli.hpp"

using namespace mixformer;

int main(int argc, char** argv) {
  RunConfig rc;
  rc.set("model.preset", "desk-small");
  rc.set("decouple.enabled", "true");
  rc.set("bench.requests", "20");
  for (int i = 1; i < argc; ++i) rc.apply_override(argv[i]);

  GeneratorSpec g;
  g.n_users = 200;
  g.n_items = 1000;
  g.n_requests = 200;
  const GeneratedData gd = generate(g);

  std::printf("%6s %12s %12s %8s\n", "K", "rlb_s", "percand_s", "speedup");
  for (std::size_t k : {1, 2, 8, 32, 128}) {
    rc.set("bench.k", std::to_string(k));
    const auto b = cli::cmd_bench_rlb(rc, gd.holdout, std::nullopt);
    std::printf("%6zu %12.4f %12.4f %8.2f\n", k, b.seconds_rlb, b.seconds_per_candidate, b.speedup());
    if (k == 1) {
      std::printf("max deviation %.3e\nflops savings:", b.max_abs_dev);
      for (const auto& [kk, s] : b.savings) std::printf(" K=%zu:%.3f", kk, s);
      std::printf("\n");
    }
  }
}
