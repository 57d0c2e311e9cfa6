#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "fedlora/errors.hpp"
#include "fedlora/protocol.hpp"

namespace fedlora {

using Clock = std::chrono::steady_clock;

// Client-side endpoint: frames to and from the aggregator.
class ClientChannel {
public:
    virtual ~ClientChannel() = default;
    virtual void send(const Bytes& frame) = 0;
    virtual std::optional<Bytes> recv(Clock::time_point deadline) = 0;
};

// Aggregator-side endpoint: frames tagged with the transport-level client id.
class AggregatorChannel {
public:
    virtual ~AggregatorChannel() = default;
    virtual void send_to(int client_id, const Bytes& frame) = 0;
    virtual std::optional<std::pair<int, Bytes>> recv_any(Clock::time_point deadline) = 0;
};

// ---------------------------------------------------------------------------
// In-process transport: per-client queues guarded by mutex/condvar. Frames
// still pass through encode/decode, so f32 quantization matches the socket
// path exactly.

class InProcessHub {
public:
    explicit InProcessHub(const std::vector<int>& client_ids) {
        for (int id : client_ids) inboxes_[id];  // default-construct queues
    }

    std::unique_ptr<AggregatorChannel> aggregator_channel() {
        return std::make_unique<HubAggregatorChannel>(*this);
    }

    std::unique_ptr<ClientChannel> client_channel(int client_id) {
        if (!inboxes_.count(client_id))
            throw ConnectionError("in-process hub: unknown client " +
                                  std::to_string(client_id));
        return std::make_unique<HubClientChannel>(*this, client_id);
    }

private:
    struct ServerInbox {
        std::mutex mu;
        std::condition_variable cv;
        std::deque<std::pair<int, Bytes>> frames;
    };
    struct ClientInbox {
        std::mutex mu;
        std::condition_variable cv;
        std::deque<Bytes> frames;
    };

    class HubAggregatorChannel : public AggregatorChannel {
    public:
        explicit HubAggregatorChannel(InProcessHub& hub) : hub_(hub) {}

        void send_to(int client_id, const Bytes& frame) override {
            auto it = hub_.inboxes_.find(client_id);
            if (it == hub_.inboxes_.end())
                throw ConnectionError("in-process hub: unknown client " +
                                      std::to_string(client_id));
            std::lock_guard lock(it->second.mu);
            it->second.frames.push_back(frame);
            it->second.cv.notify_one();
        }

        std::optional<std::pair<int, Bytes>> recv_any(Clock::time_point deadline) override {
            std::unique_lock lock(hub_.server_.mu);
            if (!hub_.server_.cv.wait_until(lock, deadline, [&] {
                    return !hub_.server_.frames.empty();
                }))
                return std::nullopt;
            auto item = std::move(hub_.server_.frames.front());
            hub_.server_.frames.pop_front();
            return item;
        }

    private:
        InProcessHub& hub_;
    };

    class HubClientChannel : public ClientChannel {
    public:
        HubClientChannel(InProcessHub& hub, int id) : hub_(hub), id_(id) {}

        void send(const Bytes& frame) override {
            std::lock_guard lock(hub_.server_.mu);
            hub_.server_.frames.emplace_back(id_, frame);
            hub_.server_.cv.notify_one();
        }

        std::optional<Bytes> recv(Clock::time_point deadline) override {
            ClientInbox& inbox = hub_.inboxes_.at(id_);
            std::unique_lock lock(inbox.mu);
            if (!inbox.cv.wait_until(lock, deadline,
                                     [&] { return !inbox.frames.empty(); }))
                return std::nullopt;
            Bytes frame = std::move(inbox.frames.front());
            inbox.frames.pop_front();
            return frame;
        }

    private:
        InProcessHub& hub_;
        int id_;
    };

    ServerInbox server_;
    std::map<int, ClientInbox> inboxes_;
};

// ---------------------------------------------------------------------------
// TCP transport: length-prefixed frames over localhost or LAN sockets.

namespace detail {

inline void write_all(int fd, const std::uint8_t* data, std::size_t len) {
    std::size_t sent = 0;
    while (sent < len) {
        const ssize_t n = ::send(fd, data + sent, len - sent, MSG_NOSIGNAL);
        if (n <= 0) throw ConnectionError("socket write failed: " +
                                          std::string(std::strerror(errno)));
        sent += static_cast<std::size_t>(n);
    }
}

// Reads exactly len bytes before the deadline; returns false on clean EOF at
// a frame boundary, throws on timeout mid-frame or socket errors.
inline bool read_exact(int fd, std::uint8_t* out, std::size_t len,
                       Clock::time_point deadline, bool allow_eof) {
    std::size_t got = 0;
    while (got < len) {
        const auto now = Clock::now();
        if (now >= deadline) {
            if (got == 0) return false;  // treat as timeout only between frames
            throw ConnectionError("socket read timed out mid-frame");
        }
        const auto remain =
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now);
        pollfd pfd{fd, POLLIN, 0};
        const int pr = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(
                                            remain.count(), 1000)));
        if (pr < 0) throw ConnectionError("poll failed");
        if (pr == 0) continue;
        const ssize_t n = ::recv(fd, out + got, len - got, 0);
        if (n == 0) {
            if (allow_eof && got == 0) return false;
            throw ConnectionError("socket closed mid-frame");
        }
        if (n < 0) throw ConnectionError("socket read failed: " +
                                         std::string(std::strerror(errno)));
        got += static_cast<std::size_t>(n);
    }
    return true;
}

// Full wire read: 4-byte length prefix and frame body.
inline std::optional<Bytes> read_frame(int fd, Clock::time_point deadline,
                                       bool allow_eof) {
    std::uint8_t len_buf[4];
    if (!read_exact(fd, len_buf, 4, deadline, allow_eof)) return std::nullopt;
    const std::size_t frame_len = get_u32_be(len_buf);
    if (frame_len > kMaxFrameBytes) throw FramingError("frame length too large");
    Bytes wire(4 + frame_len);
    std::memcpy(wire.data(), len_buf, 4);
    if (frame_len > 0 &&
        !read_exact(fd, wire.data() + 4, frame_len,
                    Clock::now() + std::chrono::seconds(30), false))
        throw ConnectionError("socket closed mid-frame");
    return wire;
}

} // namespace detail

// Aggregator side of the TCP transport. Connections identify themselves with
// their first frame (REGISTER); subsequent frames are tagged with that id.
class TcpAggregatorChannel : public AggregatorChannel {
public:
    TcpAggregatorChannel(const std::string& host, std::uint16_t port) {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw ConnectionError("cannot create listen socket");
        int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
            throw ConnectionError("bad listen host: " + host);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
            throw ConnectionError("bind failed on " + host + ":" + std::to_string(port));
        if (::listen(listen_fd_, 16) != 0) throw ConnectionError("listen failed");

        sockaddr_in bound{};
        socklen_t len = sizeof(bound);
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
        port_ = ntohs(bound.sin_port);

        acceptor_ = std::thread([this] { accept_loop(); });
    }

    ~TcpAggregatorChannel() override {
        stop_.store(true);
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        if (acceptor_.joinable()) acceptor_.join();
        {
            std::lock_guard lock(mu_);
            for (auto& [id, fd] : client_fd_) ::shutdown(fd, SHUT_RDWR);
        }
        for (auto& t : readers_)
            if (t.joinable()) t.join();
        for (auto& [id, fd] : client_fd_) ::close(fd);
    }

    std::uint16_t port() const { return port_; }

    void send_to(int client_id, const Bytes& frame) override {
        int fd = -1;
        {
            std::lock_guard lock(mu_);
            auto it = client_fd_.find(client_id);
            if (it == client_fd_.end())
                throw ConnectionError("no connection for client " +
                                      std::to_string(client_id));
            fd = it->second;
        }
        std::lock_guard wlock(write_mu_);
        detail::write_all(fd, frame.data(), frame.size());
    }

    std::optional<std::pair<int, Bytes>> recv_any(Clock::time_point deadline) override {
        std::unique_lock lock(mu_);
        if (!cv_.wait_until(lock, deadline, [&] { return !inbox_.empty(); }))
            return std::nullopt;
        auto item = std::move(inbox_.front());
        inbox_.pop_front();
        return item;
    }

private:
    void accept_loop() {
        while (!stop_.load()) {
            pollfd pfd{listen_fd_, POLLIN, 0};
            const int pr = ::poll(&pfd, 1, 100);
            if (stop_.load()) return;
            if (pr <= 0) continue;
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) continue;
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
            std::lock_guard lock(mu_);
            readers_.emplace_back([this, fd] { reader_loop(fd); });
        }
    }

    void reader_loop(int fd) {
        int client_id = -1;
        try {
            while (!stop_.load()) {
                auto frame = detail::read_frame(
                    fd, Clock::now() + std::chrono::milliseconds(200), true);
                if (stop_.load()) break;
                if (!frame) {
                    // timeout between frames: poll again; EOF also lands here
                    pollfd pfd{fd, POLLIN, 0};
                    if (::poll(&pfd, 1, 0) > 0 && (pfd.revents & (POLLHUP | POLLERR)))
                        break;
                    continue;
                }
                if (client_id < 0) {
                    // first frame must identify the connection
                    Message hello = decode(*frame);
                    if (hello.kind != MessageKind::register_) break;
                    client_id = hello.sender_id;
                    std::lock_guard lock(mu_);
                    client_fd_[client_id] = fd;
                }
                std::lock_guard lock(mu_);
                inbox_.emplace_back(client_id, std::move(*frame));
                cv_.notify_one();
            }
        } catch (const Error&) {
            // connection-level failure: drop the client silently; the round
            // logic treats missing updates as stragglers
        }
        if (client_id < 0) ::close(fd);
    }

    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> stop_{false};
    std::thread acceptor_;
    std::vector<std::thread> readers_;
    std::mutex mu_;
    std::mutex write_mu_;
    std::condition_variable cv_;
    std::deque<std::pair<int, Bytes>> inbox_;
    std::map<int, int> client_fd_;
};

class TcpClientChannel : public ClientChannel {
public:
    TcpClientChannel(const std::string& host, std::uint16_t port,
                     std::int64_t connect_timeout_ms = 5000) {
        const auto deadline = Clock::now() + std::chrono::milliseconds(connect_timeout_ms);
        while (true) {
            fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
            if (fd_ < 0) throw ConnectionError("cannot create socket");
            sockaddr_in addr{};
            addr.sin_family = AF_INET;
            addr.sin_port = htons(port);
            if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
                throw ConnectionError("bad host: " + host);
            if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0)
                break;
            ::close(fd_);
            fd_ = -1;
            if (Clock::now() >= deadline)
                throw ConnectionError("connect to " + host + ":" + std::to_string(port) +
                                      " timed out");
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
        int one = 1;
        ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    }

    ~TcpClientChannel() override {
        if (fd_ >= 0) {
            ::shutdown(fd_, SHUT_RDWR);
            ::close(fd_);
        }
    }

    void send(const Bytes& frame) override {
        detail::write_all(fd_, frame.data(), frame.size());
    }

    std::optional<Bytes> recv(Clock::time_point deadline) override {
        return detail::read_frame(fd_, deadline, false);
    }

private:
    int fd_ = -1;
};

} // namespace fedlora
