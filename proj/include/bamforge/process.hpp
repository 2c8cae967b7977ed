// SPDX-License-Identifier: Apache-2.0
//
// Child-process helpers for trainer/evaluator hooks and line-protocol model
// servers. POSIX only.

#pragma once

#include <sys/types.h>

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bamforge {

class ProcessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Splits a command template on whitespace; single and double quotes group.
std::vector<std::string> split_command(std::string_view command);

/// Runs argv[0] (PATH lookup) with inherited stdio and waits. Returns the
/// exit status, or 128 + signal number when killed by a signal.
int run_process(const std::vector<std::string>& argv);

/// A child whose stdin/stdout are pipes owned by this object.
class ChildProcess {
 public:
  explicit ChildProcess(const std::vector<std::string>& argv);
  ~ChildProcess();

  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  /// Writes all bytes to the child's stdin; false if the pipe is closed.
  bool write_all(std::string_view bytes);

  /// Next '\n'-terminated line from the child's stdout (without the
  /// newline), or nullopt at EOF.
  std::optional<std::string> read_line();

  /// Closes stdin, waits briefly for exit, then kills. Returns exit status.
  /// Buffered stdout stays readable until destruction.
  int shutdown();

  pid_t pid() const { return pid_; }

 private:
  pid_t pid_ = -1;
  int stdin_fd_ = -1;
  int stdout_fd_ = -1;
  std::string buffer_;
  std::optional<int> status_;
};

}  // namespace bamforge
