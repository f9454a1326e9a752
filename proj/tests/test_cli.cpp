// End-to-end checks of the built binary: exit codes, output files, and
// determinism of the emitted artifacts.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace {

namespace fs = std::filesystem;

const char* cli_path() { return FEDSB_CLI_PATH; }

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const fs::path out = fs::temp_directory_path() / "fedsb_cli_out.txt";
  const std::string cmd =
      std::string(cli_path()) + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = status == -1 ? -1 : WEXITSTATUS(status);
  std::ifstream in(out);
  std::ostringstream buf;
  buf << in.rdbuf();
  r.output = buf.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string write_config(const fs::path& dir, const std::string& out_dir,
                         const std::string& extra = "") {
  const fs::path path = dir / "exp.ini";
  std::ofstream out(path);
  out << "[task]\n"
         "model = linear\n"
         "out_dim = 6\n"
         "in_dim = 5\n"
         "samples = 120\n"
         "delta_scale = 1.0\n"
         "delta_rank = 2\n"
         "[federation]\n"
         "method = fed-sb\n"
         "rank = 2\n"
         "alpha = 2\n"
         "clients = 3\n"
         "rounds = 2\n"
         "batch_size = 10\n"
         "learning_rate = 0.05\n"
      << extra
      << "[output]\n"
         "seed = 4\n"
         "out_dir = "
      << out_dir << "\n";
  return path.string();
}

}  // namespace

TEST_CASE("run: produces csv and json artifacts, rounds=0 gives init metrics") {
  const fs::path dir = fresh_dir("fedsb_cli_run");
  const std::string cfg = write_config(dir, (dir / "out").string());
  const RunResult r = run_cli("run --config " + cfg);
  CHECK(r.exit_code == 0);
  const std::string csv = slurp(dir / "out" / "rounds.csv");
  CHECK(csv.find("schema_version") == 0);
  CHECK(csv.find("fedsb.rounds.v1") != std::string::npos);
  const std::string summary = slurp(dir / "out" / "summary.json");
  CHECK(summary.find("\"final_loss\"") != std::string::npos);

  const RunResult zero = run_cli("run --config " + cfg + " --seed 4 --out-dir " +
                                 (dir / "zero").string());
  CHECK(zero.exit_code == 0);
}

TEST_CASE("run: identical invocations give byte-identical outputs") {
  const fs::path dir = fresh_dir("fedsb_cli_det");
  const std::string cfg = write_config(dir, (dir / "a").string());
  CHECK(run_cli("run --config " + cfg).exit_code == 0);
  CHECK(run_cli("run --config " + cfg + " --out-dir " + (dir / "b").string())
            .exit_code == 0);
  CHECK(slurp(dir / "a" / "rounds.csv") == slurp(dir / "b" / "rounds.csv"));
  CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "b" / "summary.json"));
}

TEST_CASE("run: invalid config exits nonzero and writes nothing") {
  const fs::path dir = fresh_dir("fedsb_cli_bad");
  const fs::path cfg = dir / "bad.ini";
  {
    std::ofstream out(cfg);
    out << "[task]\nmodel = linear\nout_dim = 6\nin_dim = 5\nsamples = 2\n"
           "[federation]\nmethod = fed-sb\nrank = 2\nclients = 3\nrounds = 1\n"
           "[output]\nseed = 1\nout_dir = "
        << (dir / "out").string() << "\n";
  }
  const RunResult r = run_cli("run --config " + cfg.string());
  CHECK(r.exit_code != 0);
  CHECK(!fs::exists(dir / "out"));
}

TEST_CASE("run: private run writes the accountant dump") {
  const fs::path dir = fresh_dir("fedsb_cli_dp");
  const std::string cfg = write_config(dir, (dir / "out").string(),
                                       "[privacy]\nclip_norm = 0.5\nsigma = 1.0\n"
                                       "delta = 1e-05\nscope = step\n");
  const RunResult r = run_cli("run --config " + cfg);
  CHECK(r.exit_code == 0);
  const std::string acct = slurp(dir / "out" / "accountant.json");
  CHECK(acct.find("\"sigma\"") != std::string::npos);
  CHECK(acct.find("\"orders\"") != std::string::npos);
}

TEST_CASE("sweep: records per-method divergence in the combined csv") {
  const fs::path dir = fresh_dir("fedsb_cli_sweep");
  const std::string cfg = write_config(dir, (dir / "out").string());
  const RunResult r =
      run_cli("sweep --config " + cfg + " --methods fedit,fedex-lora,fed-sb");
  CHECK(r.exit_code == 0);
  const std::string csv = slurp(dir / "out" / "sweep.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);  // header
  double fedit_div = -1.0, fedex_div = -1.0, fedsb_div = -1.0;
  while (std::getline(lines, line)) {
    std::istringstream fields(line);
    std::string cell;
    std::getline(fields, cell, ',');  // schema
    std::string method;
    std::getline(fields, method, ',');
    std::getline(fields, cell, ',');  // final_loss
    std::getline(fields, cell, ',');  // divergence_max
    const double div = std::stod(cell);
    if (method == "fedit") fedit_div = div;
    if (method == "fedex-lora") fedex_div = div;
    if (method == "fed-sb") fedsb_div = div;
  }
  CHECK(fedit_div > 1e-9);
  CHECK(fedex_div >= 0.0);
  CHECK(fedex_div < 1e-12);
  CHECK(fedsb_div >= 0.0);
  CHECK(fedsb_div < 1e-12);
}

TEST_CASE("cost: published values and client independence") {
  RunResult r = run_cli("cost mistral-7b fedit 32 --clients 25");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("83886080") != std::string::npos);

  const RunResult c2 = run_cli("cost toy2site fed-sb 1 --clients 2");
  const RunResult c100 = run_cli("cost toy2site fed-sb 1 --clients 100");
  CHECK(c2.exit_code == 0);
  // The client count appears in the echo line; compare the cost lines only.
  const auto tail = [](const std::string& s) {
    return s.substr(s.find("communicated per round"));
  };
  CHECK(tail(c2.output) == tail(c100.output));

  CHECK(run_cli("cost no-such-arch fedit 4").exit_code != 0);
  CHECK(run_cli("cost toy2site fed-sb 0").exit_code != 0);
}

TEST_CASE("cost: writes costs.csv when asked") {
  const fs::path dir = fresh_dir("fedsb_cli_cost");
  const fs::path csv = dir / "costs.csv";
  const RunResult r = run_cli("cost llama32-3b fed-sb 120 --clients 5 --csv " +
                              csv.string());
  CHECK(r.exit_code == 0);
  const std::string body = slurp(csv);
  CHECK(body.find("fedsb.costs.v1") != std::string::npos);
  CHECK(body.find("2822400") != std::string::npos);
}

TEST_CASE("cost: custom catalog files are honored") {
  const fs::path dir = fresh_dir("fedsb_cli_arch");
  const fs::path arch = dir / "tiny.arch";
  {
    std::ofstream out(arch);
    out << "name tiny\nsite only 4 3 2\n";
  }
  const RunResult r = run_cli("cost ignored fed-sb 2 --arch-file " + arch.string());
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("arch=tiny") != std::string::npos);
  CHECK(r.output.find("communicated per round: 8 params") != std::string::npos);
}

TEST_CASE("verify: clean build passes, injected fault fails by name") {
  const RunResult ok = run_cli("verify");
  CHECK(ok.exit_code == 0);
  CHECK(ok.output.find("FAIL") == std::string::npos);

  const RunResult broken = run_cli("verify --inject-fault fedex-skip-werr");
  CHECK(broken.exit_code != 0);
  CHECK(broken.output.find("FAIL  fedex-exactness") != std::string::npos);
}
