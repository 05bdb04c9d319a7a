#include "endor/cli_io.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

namespace {

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("endor-lab");
  logger->set_pattern("endor-lab: %l: %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  const char* env = std::getenv("ENDOR_LAB_LOG");
  if (env == nullptr || *env == '\0') return;
  const std::string level = env;
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "warn") {
    spdlog::set_level(spdlog::level::warn);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::warn("ENDOR_LAB_LOG='{}' not one of error, warn, info, debug; using warn", level);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();

  CLI::App app{"Spin-Hamiltonian spectra, tensor and relaxation fits, pulsed ENDOR simulation"};
  endor::cli::CommandOptions opt;
  std::string data;
  app.add_option("command", opt.command, "Command to run")
      ->required()
      ->check(CLI::IsMember(endor::cli::command_names()));
  app.add_option("--config", opt.config, "Project config (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--data", data, "Input data file; overrides the config paths")
      ->check(CLI::ExistingFile);
  app.add_option("--out", opt.out_dir, "Output directory")->capture_default_str();
  app.add_option("--seed", opt.seed, "Seed for stochastic steps")->capture_default_str();
  app.add_option("--threads", opt.threads, "Worker threads")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  if (!data.empty()) opt.data = data;

  const endor::cli::RunReport report = endor::cli::run_command(opt);
  for (const auto& name : report.outputs) spdlog::info("wrote {}", (opt.out_dir / name).string());
  return report.exit_code;
}
