#pragma once

// Minimal POSIX child process with line-oriented pipes to its stdin/stdout.

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <optional>
#include <string>
#include <thread>

#include <fcntl.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "errors.hpp"

namespace s2d {

class ChildProcess {
public:
  /// Runs `command` through /bin/sh -c.
  explicit ChildProcess(const std::string& command) {
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw TransportError(std::string("pipe: ") + std::strerror(errno));
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw TransportError(std::string("pipe: ") + std::strerror(errno));
    }
    pid_ = ::fork();
    if (pid_ < 0) {
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) ::close(fd);
      throw TransportError(std::string("fork: ") + std::strerror(errno));
    }
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) ::close(fd);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::fcntl(to_child[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child[0], F_SETFD, FD_CLOEXEC);
    in_ = ::fdopen(to_child[1], "w");
    out_ = ::fdopen(from_child[0], "r");
    if (!in_ || !out_) {
      close_pipes();
      terminate();
      throw TransportError("fdopen failed");
    }
  }

  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  ~ChildProcess() {
    close_pipes();
    terminate();
  }

  /// Writes one line (newline appended) and flushes.
  void write_line(const std::string& line) {
    if (!in_) throw TransportError("child stdin is closed");
    // Block SIGPIPE so a dead child surfaces as EPIPE rather than killing us.
    sigset_t block, old;
    sigemptyset(&block);
    sigaddset(&block, SIGPIPE);
    pthread_sigmask(SIG_BLOCK, &block, &old);
    const bool ok = std::fputs(line.c_str(), in_) >= 0 && std::fputc('\n', in_) != EOF && std::fflush(in_) == 0;
    const int err = errno;
    if (!ok) {
      timespec zero{0, 0};
      sigtimedwait(&block, nullptr, &zero);
    }
    pthread_sigmask(SIG_SETMASK, &old, nullptr);
    if (!ok) throw TransportError(std::string("write to observer backend failed: ") + std::strerror(err));
  }

  /// Reads one line without its newline; nullopt at end of stream.
  std::optional<std::string> read_line() {
    if (!out_) return std::nullopt;
    std::string line;
    int c;
    while ((c = std::fgetc(out_)) != EOF) {
      if (c == '\n') return line;
      line.push_back(static_cast<char>(c));
    }
    if (line.empty()) return std::nullopt;
    return line;
  }

  /// Closes our end of both pipes and reaps the child, killing it after `grace`.
  int wait(std::chrono::milliseconds grace = std::chrono::milliseconds(2000)) {
    close_pipes();
    return terminate(grace);
  }

private:
  void close_pipes() {
    if (in_) std::fclose(in_);
    if (out_) std::fclose(out_);
    in_ = out_ = nullptr;
  }

  int terminate(std::chrono::milliseconds grace = std::chrono::milliseconds(2000)) {
    if (pid_ <= 0) return status_;
    const auto deadline = std::chrono::steady_clock::now() + grace;
    int status = 0;
    for (;;) {
      const pid_t r = ::waitpid(pid_, &status, WNOHANG);
      if (r == pid_) break;
      if (r < 0) {
        pid_ = -1;
        return status_;
      }
      if (std::chrono::steady_clock::now() >= deadline) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &status, 0);
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    pid_ = -1;
    status_ = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return status_;
  }

  pid_t pid_ = -1;
  int status_ = -1;
  std::FILE* in_ = nullptr;
  std::FILE* out_ = nullptr;
};

} // namespace s2d
