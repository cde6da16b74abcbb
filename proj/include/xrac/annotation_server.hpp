#pragma once

// HTTP service for collecting judgments against a question sheet. Judgments
// are appended to a CSV store and resolved last-write-wins when read.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "xrac/errors.hpp"
#include "xrac/evalsheet.hpp"

namespace xrac {

// XRAC_ANNOTATION_STORE, when set and non-empty, replaces the given path.
inline std::string resolve_store_path(const std::string& requested) {
  const char* env = std::getenv("XRAC_ANNOTATION_STORE");
  return env && *env ? std::string(env) : requested;
}

class AnnotationServer {
 public:
  AnnotationServer(QuestionSheet sheet, std::string store_path, std::string static_dir = "")
      : sheet_(std::move(sheet)), store_path_(std::move(store_path)), static_dir_(std::move(static_dir)) {
    sheet_.blind_map.clear();
    load_store();
    store_.open(store_path_, std::ios::app);
    if (!store_) throw ValidationError("cannot open annotation store '" + store_path_ + "' for writing");
    if (std::filesystem::file_size(store_path_) == 0) {
      write_csv_row(store_, annotation_csv_header());
      store_.flush();
    }
    // SO_REUSEPORT (the library default) would let a second instance share the port.
    http_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof(yes));
    });
    routes();
  }

  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;
  ~AnnotationServer() { stop(); }

  // Port 0 picks a free port. Throws if the address cannot be bound.
  int bind(const std::string& host, int port) {
    if (port == 0) {
      port_ = http_.bind_to_any_port(host);
      if (port_ < 0) throw ValidationError("cannot bind " + host);
    } else {
      if (!http_.bind_to_port(host, port)) {
        throw ValidationError("cannot bind " + host + ":" + std::to_string(port) + " (port busy?)");
      }
      port_ = port;
    }
    return port_;
  }

  // Blocks until stop().
  void listen() { http_.listen_after_bind(); }

  void start_background() {
    worker_ = std::thread([this] { listen(); });
    http_.wait_until_ready();
  }

  void stop() {
    if (http_.is_running()) http_.stop();
    if (worker_.joinable()) worker_.join();
  }

  int port() const { return port_; }

  // Snapshot of the resolved judgments.
  AnnotationSet snapshot() const {
    std::shared_lock lock(mu_);
    return resolved_locked();
  }

  std::string export_csv() const {
    std::ostringstream os;
    write_annotations_csv(os, snapshot());
    return os.str();
  }

 private:
  void load_store() {
    std::ifstream in(store_path_);
    if (!in) return;
    std::vector<CsvRow> rows = read_csv(in);
    if (rows.empty()) return;
    if (rows[0] != annotation_csv_header()) throw ParseError("annotation store has an unexpected header", 1);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() == 1 && r[0].empty()) continue;
      if (r.size() != 4) throw ParseError("annotation store row has " + std::to_string(r.size()) + " fields", i + 1);
      log_.push_back(r);
    }
  }

  AnnotationSet resolved_locked() const {
    AnnotationCollector col(sheet_, {}, "web");
    for (std::size_t i = 0; i < log_.size(); ++i) {
      int qid = 0;
      try {
        qid = std::stoi(log_[i][1]);
      } catch (const std::logic_error&) {
        continue;
      }
      col.add(log_[i][0], qid, log_[i][2], log_[i][3], store_path_, i + 2);
    }
    return col.finish().annotations;
  }

  static void send_error(httplib::Response& res, int status, const std::string& reason) {
    res.status = status;
    res.set_content(json{{"error", reason}}.dump(), "application/json");
  }

  void routes() {
    http_.Get("/api/questions", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string annotator = req.has_param("annotator") ? req.get_param_value("annotator") : "";
      std::map<std::pair<int, std::string>, Judgment> existing;
      if (!annotator.empty()) {
        for (const auto& r : snapshot().records)
          if (r.annotator_id == annotator) existing[{r.question_id, r.snippet_label}] = r.judgment;
      }
      json out = json::array();
      for (const auto& row : sheet_.rows) {
        json q{{"question_id", row.question_id},
               {"code", row.code},
               {"description", row.description},
               {"snippet_label", row.snippet_label},
               {"snippet_text", row.snippet_text}};
        auto it = existing.find({row.question_id, row.snippet_label});
        q["existing_judgment"] = it == existing.end() ? json(nullptr) : json(judgment_name(it->second));
        out.push_back(std::move(q));
      }
      res.set_content(out.dump(), "application/json");
    });

    http_.Get("/api/progress", [this](const httplib::Request& req, httplib::Response& res) {
      if (!req.has_param("annotator") || req.get_param_value("annotator").empty()) {
        send_error(res, 400, "missing annotator parameter");
        return;
      }
      const std::string annotator = req.get_param_value("annotator");
      std::size_t counts[3] = {0, 0, 0};
      std::size_t answered = 0;
      for (const auto& r : snapshot().records) {
        if (r.annotator_id != annotator) continue;
        ++answered;
        ++counts[static_cast<int>(r.judgment)];
      }
      json out{{"annotator", annotator}, {"answered", answered}, {"total", sheet_.rows.size()},
               {"HI", counts[0]},        {"I", counts[1]},        {"IR", counts[2]}};
      res.set_content(out.dump(), "application/json");
    });

    http_.Post("/api/judgment", [this](const httplib::Request& req, httplib::Response& res) {
      json body = json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object()) return send_error(res, 400, "body is not a JSON object");
      for (const char* field : {"annotator_id", "question_id", "snippet_label", "judgment"}) {
        if (!body.contains(field)) return send_error(res, 400, std::string("missing field ") + field);
      }
      if (!body["annotator_id"].is_string() || body["annotator_id"].get<std::string>().empty())
        return send_error(res, 400, "annotator_id must be a non-empty string");
      if (!body["question_id"].is_number_integer()) return send_error(res, 400, "question_id must be an integer");
      if (!body["snippet_label"].is_string() || !body["judgment"].is_string())
        return send_error(res, 400, "snippet_label and judgment must be strings");
      const std::string annotator = body["annotator_id"];
      const int qid = body["question_id"];
      const std::string label = body["snippet_label"];
      const std::string judgment = body["judgment"];
      if (!sheet_.has(qid, label)) return send_error(res, 400, "unknown question/label");
      if (!parse_judgment(judgment)) return send_error(res, 400, "judgment must be HI, I or IR");
      {
        std::unique_lock lock(mu_);
        CsvRow row{annotator, std::to_string(qid), label, judgment};
        write_csv_row(store_, row);
        store_.flush();
        if (!store_) return send_error(res, 500, "failed to write the annotation store");
        log_.push_back(std::move(row));
      }
      res.set_content(json{{"ok", true}}.dump(), "application/json");
    });

    http_.Get("/api/export", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(export_csv(), "text/csv");
    });

    if (!static_dir_.empty() && http_.set_mount_point("/", static_dir_)) return;
    http_.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(
          "<!doctype html><title>annotation service</title>"
          "<p>No UI bundle mounted. The JSON API is under /api/.</p>",
          "text/html");
    });
  }

  QuestionSheet sheet_;
  std::string store_path_;
  std::string static_dir_;
  std::ofstream store_;
  std::vector<CsvRow> log_;
  mutable std::shared_mutex mu_;
  httplib::Server http_;
  std::thread worker_;
  int port_ = -1;
};

}  // namespace xrac
