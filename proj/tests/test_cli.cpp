#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "cyclefit/io_util.hpp"
#include "cyclefit/mgp.hpp"

using namespace cyclefit;

namespace fs = std::filesystem;
using cyclefit::io_util::read_text_file;
using cyclefit::io_util::write_text_file;

namespace {

const fs::path kWorkDir = fs::temp_directory_path() / "cyclefit_cli_test";

struct CliResult {
    int exit_code;
    std::string output;
};

CliResult run_cli(const std::string& args) {
    const fs::path out = kWorkDir / "cli_stdout.txt";
    const std::string cmd =
        std::string(CLI_BINARY) + " " + args + " > " + out.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    CliResult result;
    result.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    result.output = fs::exists(out) ? read_text_file(out.string()) : "";
    return result;
}

std::size_t count_lines(const std::string& text) {
    std::size_t lines = 0;
    for (char c : text)
        if (c == '\n') ++lines;
    return lines;
}

}  // namespace

TEST_CASE("cli end-to-end workflows") {
    fs::remove_all(kWorkDir);
    fs::create_directories(kWorkDir);

    SUBCASE("version and usage errors") {
        CHECK(run_cli("--version").exit_code == 0);
        CHECK(run_cli("--version").output.find("cyclefit") != std::string::npos);
        CHECK(run_cli("generate --n 0 --out " + (kWorkDir / "x").string()).exit_code == 1);
        CHECK(run_cli("generate --n 3 --frobnicate 1 --out x").exit_code == 1);
        CHECK(run_cli("fit-mgp --data x --out y").exit_code == 1);  // --schedule required
        CHECK(run_cli("definitely-not-a-command").exit_code == 1);
    }

    SUBCASE("generate is deterministic and produces the documented row count") {
        const auto data_a = kWorkDir / "data_a";
        const auto data_b = kWorkDir / "data_b";
        CHECK(run_cli("generate --n 3 --seed 7 --out " + data_a.string()).exit_code == 0);
        CHECK(run_cli("generate --n 3 --seed 7 --out " + data_b.string()).exit_code == 0);

        const std::string csv_a = read_text_file((data_a / "dataset.csv").string());
        CHECK(count_lines(csv_a) == 1 + 3 * 105);
        CHECK(csv_a == read_text_file((data_b / "dataset.csv").string()));
        CHECK(read_text_file((data_a / "metadata.json").string()) ==
              read_text_file((data_b / "metadata.json").string()));
    }

    SUBCASE("plan-ed, fit-mgp and train-dcnn chain together") {
        const auto data = kWorkDir / "data";
        REQUIRE(run_cli("generate --n 3 --seed 9 --out " + data.string()).exit_code == 0);

        const auto opt_config = kWorkDir / "opt.json";
        write_text_file(opt_config.string(), R"({"max_iterations": 20, "restarts": 1})");

        const auto schedule = kWorkDir / "schedule.json";
        const auto planned = run_cli("plan-ed --data " + data.string() + " --budget 3 --out " +
                                     schedule.string() + " --config " + opt_config.string() +
                                     " --seed 5");
        CHECK(planned.exit_code == 0);
        const std::string schedule_text = read_text_file(schedule.string());
        CHECK(schedule_text.find("\"budget\": 3") != std::string::npos);

        const auto fits = kWorkDir / "fits";
        const auto fitted = run_cli("fit-mgp --data " + data.string() + " --blocks blockwise" +
                                    " --schedule " + schedule.string() + " --out " +
                                    fits.string() + " --config " + opt_config.string() +
                                    " --seed 6");
        CHECK(fitted.exit_code == 0);
        CHECK(fs::exists(fits / "models" / "I000.json"));
        const std::string posterior = read_text_file((fits / "posteriors" / "I000.csv").string());
        CHECK(posterior.rfind("individual_id,day,hormone,mean,variance", 0) == 0);
        CHECK(count_lines(posterior) == 1 + 5 * 105);

        // --blocks independent fits five singleton blocks per individual.
        const auto ind_fits = kWorkDir / "fits_ind";
        CHECK(run_cli("fit-mgp --data " + data.string() + " --blocks independent --schedule " +
                      schedule.string() + " --out " + ind_fits.string() + " --config " +
                      opt_config.string()).exit_code == 0);
        mgp::BlockStructure ind_blocks;
        mgp::read_model((ind_fits / "models" / "I000.json").string(), &ind_blocks);
        CHECK(ind_blocks.groups == std::vector<std::vector<int>>{{0}, {1}, {2}, {3}, {4}});

        const auto dcnn_config = kWorkDir / "dcnn.json";
        write_text_file(dcnn_config.string(),
                        R"({"layers": 3, "filter_size": 3, "hidden_width": 6,
                            "max_iterations": 30, "adaptive_updates": true, "streams": 4})");
        const auto net = kWorkDir / "net";
        const auto trained = run_cli("train-dcnn --posteriors " + fits.string() + " --targets " +
                                     data.string() + " --config " + dcnn_config.string() +
                                     " --out " + net.string() + " --seed 8");
        CHECK(trained.exit_code == 0);
        CHECK(fs::exists(net / "dcnn.json"));
        CHECK(fs::exists(net / "history.csv"));
    }

    SUBCASE("evaluate and report produce tables") {
        const auto config = kWorkDir / "experiment.json";
        write_text_file(config.string(), R"({
          "cohort": {"size": 6, "seed": 21},
          "split_seeds": [1],
          "budgets": [10],
          "schemes": ["random"],
          "variants": ["b_mgp"],
          "mgp": {"max_iterations": 30, "restarts": 1},
          "jobs": 2
        })");
        const auto out = kWorkDir / "results";
        const auto evaluated = run_cli("evaluate --config " + config.string() + " --out " +
                                       out.string());
        CHECK(evaluated.exit_code == 0);
        CHECK(fs::exists(out / "results.json"));
        CHECK(fs::exists(out / "tables" / "table_overall.csv"));
        const std::string table =
            read_text_file((out / "tables" / "table_overall.csv").string());
        CHECK(table.find("B-MGP,") != std::string::npos);

        const auto report_dir = kWorkDir / "report";
        CHECK(run_cli("report --results " + out.string() + " --out " +
                      report_dir.string()).exit_code == 0);
        CHECK(fs::exists(report_dir / "table_prediction.csv"));

        CHECK(run_cli("report --results " + (kWorkDir / "missing").string() + " --out " +
                      report_dir.string()).exit_code == 2);
    }

    fs::remove_all(kWorkDir);
}
