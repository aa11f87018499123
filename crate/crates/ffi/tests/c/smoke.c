#include <stdio.h>
#include <string.h>
#include "bagwise.h"

#define CHECK(cond) do { if (!(cond)) { fprintf(stderr, "failed: %s (line %d): %s\n", #cond, __LINE__, bw_last_error() ? bw_last_error() : ""); return 1; } } while (0)

int main(void) {
    BwFormula *f = NULL;
    CHECK(bw_formula_parse("p cnf 4 3\n1 2 0\n-2 3 0\n3 4 -1 0\n", &f) == BW_STATUS_OK);
    uint32_t n = 0;
    CHECK(bw_formula_num_variables(f, &n) == BW_STATUS_OK && n == 4);

    int8_t values[4];
    BwSolveResult result;
    CHECK(bw_solve(f, 100000, values, 4, &result) == BW_STATUS_OK);
    CHECK(result == BW_SOLVE_RESULT_SAT);
    CHECK(values[0] == 1 || values[1] == 1);

    BwDecomposition *td = NULL;
    CHECK(bw_decompose(f, BW_METHOD_EXACT, &td) == BW_STATUS_OK);
    int64_t width = -2;
    CHECK(bw_decomposition_width(td, &width) == BW_STATUS_OK && width == 2);
    char *pace = NULL;
    CHECK(bw_decomposition_to_pace(td, &pace) == BW_STATUS_OK);
    CHECK(strncmp(pace, "s td ", 5) == 0);
    bw_string_free(pace);
    bw_decomposition_free(td);
    bw_formula_free(f);

    CHECK(bw_formula_parse("p cnf 1 1\n9 0\n", &f) == BW_STATUS_PARSE);
    CHECK(bw_last_error() != NULL);

    BwTask *task = NULL;
    CHECK(bw_task_from_json("{\"id\":\"c\",\"cnf\":\"p cnf 2 2\\n1 2 0\\n-1 0\\n\",\"story\":\"\",\"mapping\":[]}", BW_METHOD_AUTO, &task) == BW_STATUS_OK);
    BwEpisode *ep = NULL;
    CHECK(bw_run_episode(task, BW_MODE_DECOMPOSED, 0.0, 0, 0, &ep) == BW_STATUS_OK);
    bool solved = false;
    CHECK(bw_episode_solved(ep, &solved) == BW_STATUS_OK && solved);
    char *jsonl = NULL;
    CHECK(bw_episode_transcript(ep, &jsonl) == BW_STATUS_OK && strstr(jsonl, "\"task_id\":\"c\"") != NULL);
    bw_string_free(jsonl);
    bw_episode_free(ep);
    bw_task_free(task);

    printf("ok %s\n", bw_version());
    return 0;
}
