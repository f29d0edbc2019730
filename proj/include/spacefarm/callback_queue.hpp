#pragma once

#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <stop_token>
#include <thread>

namespace spacefarm {

/// Runs queued callbacks in order on one background thread.
class CallbackQueue {
 public:
  CallbackQueue() : thread_([this](std::stop_token st) { loop(st); }) {}
  ~CallbackQueue() { stop(); }

  CallbackQueue(const CallbackQueue&) = delete;
  CallbackQueue& operator=(const CallbackQueue&) = delete;

  void post(std::function<void()> fn) {
    {
      std::lock_guard lk(mu_);
      if (stopped_) return;
      queue_.push_back(std::move(fn));
    }
    cv_.notify_one();
  }

  /// Drops pending callbacks and joins. Must not be called from a callback.
  void stop() {
    {
      std::lock_guard lk(mu_);
      stopped_ = true;
      queue_.clear();
    }
    if (thread_.joinable() && thread_.get_id() != std::this_thread::get_id()) {
      thread_.request_stop();
      cv_.notify_all();
      thread_.join();
    }
  }

 private:
  void loop(std::stop_token st) {
    while (true) {
      std::function<void()> fn;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, st, [&] { return !queue_.empty(); });
        if (queue_.empty()) return;
        fn = std::move(queue_.front());
        queue_.pop_front();
      }
      try {
        fn();
      } catch (...) {
        // swallowed; later callbacks still run
      }
    }
  }

  std::mutex mu_;
  std::condition_variable_any cv_;
  std::deque<std::function<void()>> queue_;
  bool stopped_ = false;
  std::jthread thread_;
};

}  // namespace spacefarm
