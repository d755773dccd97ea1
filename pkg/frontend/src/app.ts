// Browser bootstrap: hash routing between the wizard, the live scoring
// view, and the review screen. All requests go through the UI backend,
// which holds the service API key; the browser itself never sees it.

import { ApiClient } from "./api.js";
import { dir, Locale, t } from "./locale.js";
import { ReviewScreen } from "./review.js";
import { eventSourceConnector, RunSubscription } from "./runStream.js";
import { esc, ScoringViewState } from "./scoringView.js";
import { AssignmentWizard } from "./wizard.js";

const api = new ApiClient((path, init) => fetch(path, init));

let locale: Locale = (localStorage.getItem("locale") as Locale) || "arabic";

function setLocale(next: Locale): void {
  locale = next;
  localStorage.setItem("locale", next);
  document.documentElement.setAttribute("dir", dir(next));
  document.documentElement.setAttribute("lang", next === "arabic" ? "ar" : "en");
  void route();
}

function root(): HTMLElement {
  return document.getElementById("app")!;
}

async function showScoring(runId: string): Promise<void> {
  const snapshot = await api.getRun(runId);
  const essayIds = snapshot.requested.map((r) => r.essay_id);
  const traits = snapshot.requested[0]?.traits ?? [];
  const view = new ScoringViewState(essayIds, traits);
  const render = () => {
    root().innerHTML = view.renderTable(locale);
  };
  render();
  const subscription = new RunSubscription(eventSourceConnector(), runId, {
    onEvent: (ev) => {
      view.applyEvent(ev);
      render();
    },
  });
  subscription.start(0);
}

async function showReview(assignmentId: string): Promise<void> {
  const config = await api.getConfig();
  const review = new ReviewScreen(api, config, assignmentId);
  await review.load();
  const traits = config.traits.filter((spec) =>
    review.essays.some((e) => review.finalized?.essays[e.id]?.[spec.name] !== undefined),
  );
  const rows = review.essays
    .map((essay) => {
      const cells = traits
        .map((spec) => {
          const cell = review.finalized?.essays[essay.id]?.[spec.name];
          if (!cell) return "<td>-</td>";
          const marker =
            cell.source === "refined"
              ? ` <small>${esc(t(locale, "refined_marker"))}</small>`
              : cell.source === "derived"
                ? ` <small>${esc(t(locale, "derived_marker"))}</small>`
                : "";
          return `<td data-essay="${esc(essay.id)}" data-trait="${esc(spec.name)}">${cell.value}${marker}</td>`;
        })
        .join("");
      return `<tr><th>${esc(essay.id)}</th>${cells}<td><details><summary>${esc(
        t(locale, "essay"),
      )}</summary><p class="essay-text">${esc(essay.text)}</p></details></td></tr>`;
    })
    .join("");
  root().innerHTML = `
    <div dir="${dir(locale)}">
      <h2>${esc(assignmentId)}</h2>
      <table><thead><tr><th></th>${traits.map((s) => `<th>${esc(s.name)}</th>`).join("")}<th></th></tr></thead>
      <tbody>${rows}</tbody></table>
      <button id="report">${esc(t(locale, "report_download"))}</button>
    </div>`;
  document.getElementById("report")!.addEventListener("click", async () => {
    const report = await review.downloadReport();
    const blob = new Blob([JSON.stringify(report, null, 2)], { type: "application/json" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = `${assignmentId}-report.json`;
    a.click();
  });
}

async function showWizard(): Promise<void> {
  const config = await api.getConfig();
  const wizard = new AssignmentWizard(api, config);
  root().innerHTML = `
    <div dir="${dir(locale)}">
      <h2>${esc(t(locale, "wizard_general"))}</h2>
      <p>${config.essay_types.map((e) => esc(e)).join(" / ")}</p>
      <p>${wizard.configurableTraits.map((trait) => esc(trait)).join(", ")}</p>
    </div>`;
}

async function route(): Promise<void> {
  const hash = location.hash.slice(1);
  const [page, arg] = hash.split("/");
  if (page === "run" && arg) return showScoring(arg);
  if (page === "review" && arg) return showReview(arg);
  return showWizard();
}

window.addEventListener("hashchange", () => void route());
document.getElementById("locale-toggle")?.addEventListener("click", () => {
  setLocale(locale === "arabic" ? "english" : "arabic");
});
setLocale(locale);
