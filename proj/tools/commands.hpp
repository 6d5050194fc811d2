#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace dcn::cli {

/// Files and directories a command creates under its output directory. Unless
/// commit() is called, the destructor removes them again.
class Outputs {
 public:
  explicit Outputs(std::filesystem::path root);
  ~Outputs();
  Outputs(const Outputs&) = delete;
  Outputs& operator=(const Outputs&) = delete;

  /// Path of `name` under the root; parent directories are created.
  std::filesystem::path file(const std::string& name);
  /// A subdirectory whose whole content is discarded on failure.
  std::filesystem::path directory(const std::string& name);
  void commit() { committed_ = true; }

 private:
  void make_dirs(const std::filesystem::path& dir);

  std::filesystem::path root_;
  std::vector<std::filesystem::path> files_;
  std::vector<std::filesystem::path> dirs_;  // created by us, outermost first
  bool committed_ = false;
};

/// Runs one resolved command. Results go to `out`, progress to `log`.
void run(const RunConfig& config, std::ostream& out, std::ostream& log);

/// Full entry point: parse, echo the resolved config to `log`, run. Returns the
/// process exit status; failures print one "error: ..." line to `log`.
int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& log);

}  // namespace dcn::cli
