#pragma once

#include <array>
#include <atomic>
#include <condition_variable>
#include <ctime>
#include <deque>
#include <functional>
#include <future>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "tunekit/checkpoint.hpp"
#include "tunekit/common.hpp"
#include "tunekit/model.hpp"
#include "tunekit/template.hpp"
#include "tunekit/train.hpp"
#include "tunekit/tuners.hpp"

namespace tunekit {

struct ServeOptions {
    std::string checkpoint_dir;
    // serving name -> adapter checkpoint dir; names must be unique and not "base"
    std::vector<std::pair<std::string, std::string>> adapters;
    // port 0 binds any free port (the bound port is reported by port())
    int port = 8000;
    std::string host = "127.0.0.1";
    // pending generation requests beyond this bound are answered 429
    int queue_limit = 32;
    int default_max_tokens = 128;
};

namespace detail {

struct GenJob {
    const Model<float>* model = nullptr;
    std::vector<int> prompt;
    GenerationParams gp;
    std::promise<std::vector<int>> done;
};

inline nlohmann::json error_json(const std::string& message, const std::string& type) {
    return {{"error", {{"message", message}, {"type", type}}}};
}

inline void send_error(httplib::Response& res, int status, const std::string& message,
                       const std::string& type) {
    res.status = status;
    res.set_content(error_json(message, type).dump(), "application/json");
}

// request errors carry the HTTP status they map to
struct RequestError : Error {
    int status;
    RequestError(int s, const std::string& msg) : Error(msg), status(s) {}
};

}  // namespace detail

// One base checkpoint plus any number of unmerged adapters served over an
// OpenAI-style chat-completions interface. Connections are accepted
// concurrently; generation runs on a single worker thread in request order,
// so switching adapters is just picking which model the job runs on.
class ChatServer {
  public:
    explicit ChatServer(const ServeOptions& options) : options_(options) {
        base_ = std::make_unique<Model<float>>(
            load_model_checkpoint<float>(options.checkpoint_dir, &tpl_));
        specials_ = specials_from(tpl_);
        models_["base"] = base_.get();
        for (const auto& [name, dir] : options.adapters) {
            if (name.empty() || name == "base") fail_validation("invalid adapter name: " + name);
            if (models_.count(name)) fail_validation("duplicate adapter name: " + name);
            auto tuned = load_adapter_checkpoint<float>(dir, base_->clone());
            models_[name] = &tuned->model();
            adapters_.push_back(std::move(tuned));
        }
        register_routes();
    }

    ~ChatServer() { stop(); }

    void start() {
        if (running_) return;
        if (options_.port == 0) {
            port_ = server_.bind_to_any_port(options_.host);
            if (port_ < 0) fail("cannot bind a port on " + options_.host);
        } else {
            port_ = options_.port;
            if (!server_.bind_to_port(options_.host, port_))
                fail("cannot bind port " + std::to_string(port_));
        }
        worker_ = std::thread([this] { worker_loop(); });
        listener_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        running_ = true;
        log_info("serving on " + options_.host + ":" + std::to_string(port_) + " with " +
                 std::to_string(models_.size()) + " models");
    }

    void stop() {
        if (!running_) return;
        server_.stop();
        listener_.join();
        {
            std::lock_guard<std::mutex> lock(mu_);
            stopping_ = true;
        }
        cv_.notify_all();
        worker_.join();
        stopping_ = false;
        running_ = false;
    }

    int port() const { return port_; }
    const std::vector<std::string>& model_names() const { return names_; }

  private:
    void register_routes() {
        names_.push_back("base");
        for (const auto& [name, dir] : options_.adapters) {
            (void)dir;
            names_.push_back(name);
        }

        server_.Get("/v1/models", [this](const httplib::Request&, httplib::Response& res) {
            nlohmann::json data = nlohmann::json::array();
            for (const std::string& name : names_)
                data.push_back({{"id", name}, {"object", "model"}, {"owned_by", "tunekit"}});
            res.set_content(nlohmann::json{{"object", "list"}, {"data", data}}.dump(),
                            "application/json");
        });

        server_.Post("/v1/chat/completions",
                     [this](const httplib::Request& req, httplib::Response& res) {
                         try {
                             handle_chat(req, res);
                         } catch (const detail::RequestError& e) {
                             const char* type = e.status == 404 ? "invalid_request_error"
                                                : e.status == 429
                                                    ? "overloaded_error"
                                                    : e.status == 400 ? "invalid_request_error"
                                                                      : "server_error";
                             detail::send_error(res, e.status, e.what(), type);
                         } catch (const std::exception& e) {
                             detail::send_error(res, 500, e.what(), "server_error");
                         }
                     });
    }

    static std::string str_field(const nlohmann::json& j, const char* key) {
        if (!j.contains(key) || !j[key].is_string())
            throw detail::RequestError(400, std::string("field '") + key + "' must be a string");
        return j[key].get<std::string>();
    }

    // messages must be: optional leading system, then user/assistant strictly
    // alternating, ending with the user turn being answered
    StandardRecord record_from_messages(const nlohmann::json& body) const {
        if (!body.contains("messages") || !body["messages"].is_array() ||
            body["messages"].empty())
            throw detail::RequestError(400, "messages must be a non-empty array");
        StandardRecord rec;
        std::vector<std::pair<std::string, std::string>> turns;
        size_t i = 0;
        const auto& msgs = body["messages"];
        if (str_field(msgs[0], "role") == "system") {
            rec.system = str_field(msgs[0], "content");
            i = 1;
        }
        for (; i < msgs.size(); ++i) {
            const std::string role = str_field(msgs[i], "role");
            const std::string content = str_field(msgs[i], "content");
            const bool want_user = turns.empty() || !turns.back().second.empty();
            if (role == "user" && want_user) {
                turns.emplace_back(content, "");
            } else if (role == "assistant" && !want_user) {
                turns.back().second = content;
            } else {
                throw detail::RequestError(
                    400, "messages must alternate user/assistant after an optional system");
            }
        }
        if (turns.empty() || !turns.back().second.empty())
            throw detail::RequestError(400, "the last message must come from the user");
        rec.query = turns.back().first;
        turns.pop_back();
        for (auto& [q, a] : turns) rec.history.push_back({std::move(q), std::move(a)});
        if (body.contains("tools")) {
            if (!body["tools"].is_array())
                throw detail::RequestError(400, "tools must be an array");
            for (const nlohmann::json& t : body["tools"]) rec.tools.push_back(t);
        }
        return rec;
    }

    std::vector<int> run_job(const Model<float>* model, std::vector<int> prompt,
                             const GenerationParams& gp) {
        std::future<std::vector<int>> result;
        {
            std::lock_guard<std::mutex> lock(mu_);
            if (int(queue_.size()) >= options_.queue_limit)
                throw detail::RequestError(429, "request queue is full");
            detail::GenJob job;
            job.model = model;
            job.prompt = std::move(prompt);
            job.gp = gp;
            result = job.done.get_future();
            queue_.push_back(std::move(job));
        }
        cv_.notify_one();
        return result.get();
    }

    void handle_chat(const httplib::Request& req, httplib::Response& res) {
        nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
        if (body.is_discarded() || !body.is_object())
            throw detail::RequestError(400, "request body is not a json object");

        const std::string model_name =
            body.contains("model") ? str_field(body, "model") : "base";
        const auto it = models_.find(model_name);
        if (it == models_.end())
            throw detail::RequestError(404, "model not found: " + model_name);
        const Model<float>* model = it->second;

        const StandardRecord rec = record_from_messages(body);
        const double temperature =
            body.contains("temperature") ? body["temperature"].get<double>() : 0.0;
        if (temperature < 0) throw detail::RequestError(400, "temperature must be >= 0");
        const int max_tokens = body.contains("max_tokens") ? body["max_tokens"].get<int>()
                                                           : options_.default_max_tokens;
        if (max_tokens < 1) throw detail::RequestError(400, "max_tokens must be >= 1");
        const bool stream = body.contains("stream") && body["stream"].get<bool>();

        const std::string prompt_text = segments_text(render_prompt(rec, tpl_));
        auto [prompt_ids, offsets] = tokenize_with_offsets(prompt_text, specials_);
        const int room = model->config.max_seq_len - int(prompt_ids.size());
        if (room < 1) throw detail::RequestError(400, "prompt fills the whole context window");

        GenerationParams gp;
        gp.max_new_tokens = std::min(max_tokens, room);
        gp.temperature = temperature;
        gp.seed = body.contains("seed") ? body["seed"].get<uint64_t>() : 0;
        gp.stop_token = kImEndId;

        const int prompt_tokens = int(prompt_ids.size());
        const std::vector<int> gen = run_job(model, std::move(prompt_ids), gp);

        const std::string id = "chatcmpl-" + std::to_string(++request_count_);
        const int64_t created = int64_t(std::time(nullptr));
        const char* finish = int(gen.size()) < gp.max_new_tokens ? "stop" : "length";

        if (stream) {
            std::string sse;
            for (const int tok : gen) {
                const nlohmann::json chunk = {
                    {"id", id},
                    {"object", "chat.completion.chunk"},
                    {"created", created},
                    {"model", model_name},
                    {"choices",
                     {{{"index", 0},
                       {"delta",
                        {{"content", detail::bytes_to_utf8(decode({tok}, specials_))}}},
                       {"finish_reason", nullptr}}}}};
                sse += "data: " + chunk.dump() + "\n\n";
            }
            const nlohmann::json last = {{"id", id},
                                         {"object", "chat.completion.chunk"},
                                         {"created", created},
                                         {"model", model_name},
                                         {"choices",
                                          {{{"index", 0},
                                            {"delta", nlohmann::json::object()},
                                            {"finish_reason", finish}}}}};
            sse += "data: " + last.dump() + "\n\n";
            sse += "data: [DONE]\n\n";
            res.set_content(sse, "text/event-stream");
            return;
        }

        const nlohmann::json out = {
            {"id", id},
            {"object", "chat.completion"},
            {"created", created},
            {"model", model_name},
            {"choices",
             {{{"index", 0},
               {"message",
                {{"role", "assistant"},
                 {"content", detail::bytes_to_utf8(decode(gen, specials_))}}},
               {"finish_reason", finish}}}},
            {"usage",
             {{"prompt_tokens", prompt_tokens},
              {"completion_tokens", int(gen.size())},
              {"total_tokens", prompt_tokens + int(gen.size())}}}};
        res.set_content(out.dump(), "application/json");
    }

    void worker_loop() {
        while (true) {
            std::unique_lock<std::mutex> lock(mu_);
            cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
            if (queue_.empty()) {
                if (stopping_) return;
                continue;
            }
            detail::GenJob job = std::move(queue_.front());
            queue_.pop_front();
            lock.unlock();
            try {
                job.done.set_value(job.model->generate(job.prompt, job.gp));
            } catch (...) {
                job.done.set_exception(std::current_exception());
            }
        }
    }

    ServeOptions options_;
    TemplateSpec tpl_;
    SpecialTokens specials_;
    std::unique_ptr<Model<float>> base_;
    std::vector<std::unique_ptr<TunedModel<float>>> adapters_;
    std::map<std::string, const Model<float>*> models_;
    std::vector<std::string> names_;

    httplib::Server server_;
    std::thread listener_;
    std::thread worker_;
    std::deque<detail::GenJob> queue_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stopping_ = false;
    bool running_ = false;
    int port_ = -1;
    std::atomic<uint64_t> request_count_{0};
};

// Line-oriented chat loop. Each input line becomes the next user turn with
// running history; ":clear" resets the history, ":exit" leaves. Errors are
// reported one per line and the loop keeps going.
inline void infer_repl(const Model<float>& model, const TemplateSpec& tpl,
                       const GenerationParams& base_gp, std::istream& in, std::ostream& out) {
    const SpecialTokens specials = specials_from(tpl);
    std::vector<std::array<std::string, 2>> history;
    std::string line;
    while (std::getline(in, line)) {
        if (line == ":exit") break;
        if (line == ":clear") {
            history.clear();
            out << "(history cleared)\n";
            continue;
        }
        if (line.empty()) continue;
        try {
            StandardRecord rec;
            rec.query = line;
            for (const auto& turn : history) rec.history.push_back({turn[0], turn[1]});
            const std::string prompt_text = segments_text(render_prompt(rec, tpl));
            auto [prompt_ids, offsets] = tokenize_with_offsets(prompt_text, specials);
            const int room = model.config.max_seq_len - int(prompt_ids.size());
            if (room < 1) fail_validation("input too long for the context window");
            GenerationParams gp = base_gp;
            gp.max_new_tokens = std::min(gp.max_new_tokens, room);
            gp.stop_token = kImEndId;
            const std::string reply = decode(model.generate(prompt_ids, gp), specials);
            out << reply << "\n";
            history.push_back({line, reply});
        } catch (const std::exception& e) {
            out << "[error] " << e.what() << "\n";
        }
    }
}

}  // namespace tunekit
