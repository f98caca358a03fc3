#include "fundus/thread_pool.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace fundus {

namespace {

std::atomic<int> g_num_threads{1};
thread_local bool t_in_worker = false;

struct Pool {
  struct Job {
    const std::function<void(std::int64_t, std::int64_t)>* fn = nullptr;
    std::int64_t n = 0;
    std::int64_t chunk = 0;
    std::atomic<std::int64_t> next{0};
    std::atomic<std::int64_t> remaining{0};
    std::atomic<int> active{0};
    int max_participants = 0;
  };

  std::vector<std::thread> workers;
  std::mutex mu;
  std::condition_variable cv_work;
  std::condition_variable cv_done;
  std::mutex run_mu;  // one parallel_for in flight at a time
  Job* job = nullptr;
  std::uint64_t job_id = 0;
  bool stop = false;

  Pool() {
    unsigned hw = std::thread::hardware_concurrency();
    int n = hw > 1 ? static_cast<int>(hw) - 1 : 0;
    workers.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      workers.emplace_back([this, i] { worker_loop(i); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu);
      stop = true;
    }
    cv_work.notify_all();
    for (auto& w : workers) w.join();
  }

  static void run_chunks(Job& j) {
    for (;;) {
      std::int64_t b = j.next.fetch_add(j.chunk);
      if (b >= j.n) break;
      std::int64_t e = std::min<std::int64_t>(b + j.chunk, j.n);
      (*j.fn)(b, e);
      j.remaining.fetch_sub(e - b);
    }
  }

  void worker_loop(int id) {
    t_in_worker = true;
    std::uint64_t seen = 0;
    for (;;) {
      Job* my = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu);
        cv_work.wait(lk, [&] { return stop || (job && job_id != seen); });
        if (stop) return;
        seen = job_id;
        if (id + 1 < job->max_participants) {
          my = job;
          my->active.fetch_add(1);
        }
      }
      if (my) {
        run_chunks(*my);
        const bool last = my->active.fetch_sub(1) == 1 && my->remaining.load() == 0;
        if (last) {
          // the completion flags are atomics mutated outside mu, so the
          // notify must hold mu or the waiter can miss it between its
          // predicate check and the actual wait
          std::lock_guard<std::mutex> lk(mu);
          cv_done.notify_one();
        }
      }
    }
  }

  void run(std::int64_t n, std::int64_t grain,
           const std::function<void(std::int64_t, std::int64_t)>& fn, int participants) {
    Job j;
    j.fn = &fn;
    j.n = n;
    std::int64_t pieces = std::max<std::int64_t>(
        1, std::min<std::int64_t>(n / std::max<std::int64_t>(1, grain),
                                  4 * static_cast<std::int64_t>(participants)));
    j.chunk = (n + pieces - 1) / pieces;
    j.remaining.store(n);
    j.max_participants = participants;
    {
      std::lock_guard<std::mutex> lk(mu);
      job = &j;
      ++job_id;
    }
    cv_work.notify_all();
    run_chunks(j);
    {
      std::unique_lock<std::mutex> lk(mu);
      cv_done.wait(lk, [&] { return j.remaining.load() == 0 && j.active.load() == 0; });
      job = nullptr;
    }
  }
};

Pool& pool() {
  static Pool p;
  return p;
}

}  // namespace

int num_threads() { return g_num_threads.load(); }

void set_num_threads(int n) {
  if (n < 1) {
    unsigned hw = std::thread::hardware_concurrency();
    n = hw > 0 ? static_cast<int>(hw) : 1;
  }
  g_num_threads.store(n);
}

void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  int k = num_threads();
  if (k <= 1 || t_in_worker || n < 2 * grain) {
    fn(0, n);
    return;
  }
  Pool& p = pool();
  int participants = std::min<int>(k, static_cast<int>(p.workers.size()) + 1);
  if (participants <= 1) {
    fn(0, n);
    return;
  }
  std::unique_lock<std::mutex> serial(p.run_mu, std::try_to_lock);
  if (!serial.owns_lock()) {
    fn(0, n);
    return;
  }
  p.run(n, grain, fn, participants);
}

}  // namespace fundus
