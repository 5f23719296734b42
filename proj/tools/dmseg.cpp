// dmseg command-line front end: phantom generation, training, evaluation,
// inference, benchmarks and the self-test suite.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "dmseg/dmseg.hpp"
#include "support/acceptance.hpp"

namespace {

using namespace dmseg;

// Training allocates and frees the same large buffers every step; keeping
// them in the heap instead of returning them to the OS saves ~10% per step.
void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

int cmd_selftest(bool all) {
  bool ok = true;
  for (const auto& check : acceptance::all_checks()) {
    if (check.long_running && !all) {
      std::printf("[SKIP] %2d %s (long-running; pass --all)\n", check.id, check.name.c_str());
      continue;
    }
    ok = acceptance::run_check(check) && ok;
  }
  return ok ? 0 : 1;
}

int cmd_phantom(const std::string& out, int count, index_t size, int classes, std::uint64_t seed, double noise) {
  PhantomSpec spec;
  spec.size = size;
  spec.num_classes = classes;
  spec.seed = seed;
  spec.noise_sigma = noise;
  const auto manifest = write_phantom_dataset(out, count, spec);
  std::printf("wrote %d phantoms; manifest %s\n", count, manifest.c_str());
  return 0;
}

template <typename T>
int train_with(const TrainConfig& cfg) {
  Trainer<T> trainer(cfg);
  std::printf("parameters %ld, train cases %zu, validation cases %zu, steps %ld\n",
              static_cast<long>(parameter_count(trainer.parameters())), trainer.train_cases().size(),
              trainer.val_cases().size(), static_cast<long>(cfg.total_steps()));
  std::printf("step,lr,loss,val_dice\n");
  const auto result = trainer.run([](const LogRow& row) {
    std::printf("%ld,%.6g,%.6f,", static_cast<long>(row.step), row.lr, row.loss);
    if (row.val_dice) std::printf("%.6f", *row.val_dice);
    std::printf("\n");
    std::fflush(stdout);
  });
  if (result.best_dice) std::printf("best %s dice %.6f\n", cfg.eval_on.c_str(), *result.best_dice);
  if (!cfg.out.empty()) std::printf("outputs in %s\n", cfg.out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path) {
  const auto cfg = load_config(config_path);
  return cfg.precision == Precision::Float64 ? train_with<double>(cfg) : train_with<float>(cfg);
}

template <typename T>
int eval_with(const CheckpointData& ck, const std::string& manifest, const std::string& out) {
  const auto cfg = parse_config(ck.config);
  const auto net = model_from_checkpoint<T>(ck);
  std::vector<std::pair<std::string, MetricReport>> reports;
  double dice_sum = 0.0;
  for (const auto& rec : read_manifest(manifest)) {
    const auto c = load_case<T>(rec);
    const auto pred = predict_labels(net, intensity_normalize(c.image, cfg.normalize));
    auto report = evaluate(pred, c.label, static_cast<std::int32_t>(cfg.model.decoder.num_classes), c.spacing);
    std::printf("%s: mean dice %.4f, mean hd95 %s\n", c.id.c_str(), report.mean_dice,
                format_hd95(report.mean_hd95).c_str());
    dice_sum += report.mean_dice;
    reports.emplace_back(c.id, std::move(report));
  }
  std::ofstream csv(out);
  if (!csv) throw InvalidInput("cannot write " + out);
  write_report_csv(csv, reports);
  if (!reports.empty()) std::printf("mean dice over %zu cases: %.4f\n", reports.size(), dice_sum / double(reports.size()));
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& manifest, const std::string& out) {
  const auto ck = load_checkpoint(ckpt);
  return parse_config(ck.config).precision == Precision::Float64 ? eval_with<double>(ck, manifest, out)
                                                                  : eval_with<float>(ck, manifest, out);
}

template <typename T>
int infer_with(const CheckpointData& ck, const std::string& in, const std::string& out) {
  const auto cfg = parse_config(ck.config);
  const auto net = model_from_checkpoint<T>(ck);
  const auto img = read_nifti(in);
  auto volume = img.to_tensor<T>();
  if (volume.rank() == 3) volume = Tensor<T>(Shape{1, volume.dim(0), volume.dim(1), volume.dim(2)}, volume.values());
  const auto labels = predict_labels(net, intensity_normalize(volume, cfg.normalize));
  write_nifti(out, labels_to_nifti(labels, img.spacing));
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& in, const std::string& out) {
  const auto ck = load_checkpoint(ckpt);
  return parse_config(ck.config).precision == Precision::Float64 ? infer_with<double>(ck, in, out)
                                                                  : infer_with<float>(ck, in, out);
}

template <typename F>
double seconds_per_iter(int iters, F&& f) {
  f();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / iters;
}

int cmd_bench_scan(const std::string& dims_text, int iters, index_t channels, index_t state) {
  const auto parts = detail::split(dims_text, ',');
  if (parts.size() != 3) throw InvalidInput("--dims expects D,H,W");
  const VolumeDims dims{detail::parse_int<index_t>(parts[0], "D"), detail::parse_int<index_t>(parts[1], "H"),
                        detail::parse_int<index_t>(parts[2], "W")};
  if (iters < 1) throw InvalidInput("--iters must be positive");
  std::mt19937_64 rng(0);
  const index_t L = dims.volume();
  auto z = testing::random_tensor(Shape{1, channels, dims.d, dims.h, dims.w}, rng);
  Tensor<float> zf(z.shape());
  for (index_t i = 0; i < z.numel(); ++i) zf[i] = static_cast<float>(z[i]);
  std::printf("%-22s %-20s %10s %12s %12s\n", "op", "order", "elements", "ms/iter", "Melem/s");
  for (ScanOrder order : kAllScanOrders) {
    NoGradGuard no_grad;
    const double fl = seconds_per_iter(iters, [&] { (void)flatten(zf, order); });
    const auto seq = flatten(zf, order);
    const double un = seconds_per_iter(iters, [&] { (void)unflatten(seq, order, dims); });
    const double n = double(L * channels);
    std::printf("%-22s %-20s %10ld %12.3f %12.1f\n", "flatten", std::string(to_string(order)).c_str(),
                static_cast<long>(L * channels), fl * 1e3, n / fl / 1e6);
    std::printf("%-22s %-20s %10ld %12.3f %12.1f\n", "unflatten", std::string(to_string(order)).c_str(),
                static_cast<long>(L * channels), un * 1e3, n / un / 1e6);
  }
  const index_t E = 2 * channels;
  auto make = [&](Shape s, double lo, double hi) {
    auto t = testing::random_tensor(std::move(s), rng, lo, hi, false);
    Tensor<float> f(t.shape());
    for (index_t i = 0; i < t.numel(); ++i) f[i] = static_cast<float>(t[i]);
    return f;
  };
  auto x = make(Shape{1, L, E}, -1, 1), delta = make(Shape{1, L, E}, 1e-3, 0.1);
  auto A = make(Shape{E, state}, -2, -0.1), B = make(Shape{1, L, state}, -1, 1), C = make(Shape{1, L, state}, -1, 1);
  auto D = make(Shape{E}, -1, 1);
  {
    NoGradGuard no_grad;
    const double fwd = seconds_per_iter(iters, [&] { (void)selective_scan(x, delta, A, B, C, D); });
    std::printf("%-22s %-20s %10ld %12.3f %12.1f\n", "selective_scan fwd", "-", static_cast<long>(L * E * state),
                fwd * 1e3, double(L * E * state) / fwd / 1e6);
  }
  for (auto* t : {&x, &delta, &A, &B, &C, &D}) t->set_requires_grad(true);
  const double fb = seconds_per_iter(iters, [&] {
    const auto y = selective_scan(x, delta, A, B, C, D);
    backward(sum(y));
  });
  std::printf("%-22s %-20s %10ld %12.3f %12.1f\n", "selective_scan fwd+bwd", "-", static_cast<long>(L * E * state),
              fb * 1e3, double(L * E * state) / fb / 1e6);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"dmseg: dual-Mamba 3-D segmentation toolkit"};
  app.require_subcommand(1);

  bool all = false;
  auto* selftest = app.add_subcommand("selftest", "run the oracle and invariant checks");
  selftest->add_flag("--all", all, "include the long-running training checks");

  std::string out_dir;
  int count = 8, classes = 3;
  index_t size = 32;
  std::uint64_t seed = 7;
  double noise = 0.1;
  auto* phantom = app.add_subcommand("phantom", "write a synthetic phantom dataset");
  phantom->add_option("--out", out_dir, "output directory")->required();
  phantom->add_option("--count", count, "number of volumes");
  phantom->add_option("--size", size, "edge length (multiple of 16)");
  phantom->add_option("--classes", classes, "classes including background");
  phantom->add_option("--seed", seed, "generator seed");
  phantom->add_option("--noise", noise, "Gaussian noise sigma");

  std::string config;
  auto* train = app.add_subcommand("train", "train from a config file");
  train->add_option("--config", config, "config file")->required()->check(CLI::ExistingFile);

  std::string ckpt, manifest, out, in;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "report CSV")->required();

  auto* infer = app.add_subcommand("infer", "segment one volume");
  infer->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--in", in, "input NIfTI")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", out, "output label NIfTI")->required();

  std::string dims = "32,32,32";
  int iters = 10;
  index_t channels = 8, state = 16;
  auto* bench = app.add_subcommand("bench", "throughput benchmarks");
  bench->require_subcommand(1);
  auto* bench_scan = bench->add_subcommand("scan", "scan orders and selective scan");
  bench_scan->add_option("--dims", dims, "volume dims D,H,W");
  bench_scan->add_option("--iters", iters, "timed iterations");
  bench_scan->add_option("--channels", channels, "feature channels");
  bench_scan->add_option("--state", state, "SSM state size");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*selftest) return cmd_selftest(all);
    if (*phantom) return cmd_phantom(out_dir, count, size, classes, seed, noise);
    if (*train) return cmd_train(config);
    if (*eval) return cmd_eval(ckpt, manifest, out);
    if (*infer) return cmd_infer(ckpt, in, out);
    if (*bench_scan) return cmd_bench_scan(dims, iters, channels, state);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
