/** HTML builders for the three screens. Pure string functions so rendering
 * is testable without a browser. */

import { QuizFlow } from "./flow.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

function errorBanner(flow: QuizFlow): string {
  if (!flow.error) return "";
  return `<div class="error" role="alert">${escapeHtml(flow.error)}
    <button data-action="dismiss-error">dismiss</button></div>`;
}

export function renderMasteryBars(flow: QuizFlow): string {
  const bars = flow
    .masteryBars()
    .map(
      (bar) => `<div class="bar-row" data-skill="${escapeHtml(bar.skillId)}">
        <span class="bar-name">${escapeHtml(bar.name)}</span>
        <span class="bar-track"><span class="bar-fill" style="width:${(
          bar.value * 100
        ).toFixed(1)}%"></span></span>
        <span class="bar-value">${bar.label}</span>
      </div>`,
    )
    .join("\n");
  return `<div class="mastery">${bars}</div>`;
}

export function renderStart(flow: QuizFlow): string {
  return `<section class="screen screen-start">
    <h1>Adaptive practice</h1>
    ${errorBanner(flow)}
    <form data-action="start-form">
      <label>Student id (leave empty to start fresh)
        <input name="student" type="text" placeholder="fresh" />
      </label>
      <label>Number of items
        <input name="budget" type="number" min="0" value="10" />
      </label>
      <button type="submit" ${flow.busy ? "disabled" : ""}>Start session</button>
    </form>
  </section>`;
}

export function renderQuiz(flow: QuizFlow): string {
  const item = flow.item;
  const itemBlock = item
    ? `<div class="item">
        <p class="item-text">${escapeHtml(item.text)}</p>
        <p class="item-knowledge">${item.knowledge
          .map((k) => `<span class="chip">${escapeHtml(k)}</span>`)
          .join(" ")}</p>
        <div class="answer-buttons">
          <button data-action="answer-correct" ${flow.busy ? "disabled" : ""}>
            I got it right</button>
          <button data-action="answer-incorrect" ${flow.busy ? "disabled" : ""}>
            I got it wrong</button>
        </div>
      </div>`
    : `<div class="item"><button data-action="retry-next">Load next item</button></div>`;
  return `<section class="screen screen-quiz">
    <h1>Step ${Math.min(flow.stepsDone + 1, flow.budget)}/${flow.budget}</h1>
    ${errorBanner(flow)}
    ${itemBlock}
    <h2>Mastery</h2>
    ${renderMasteryBars(flow)}
  </section>`;
}

export function renderFeedback(flow: QuizFlow): string {
  const report = flow.feedback;
  if (!report) {
    return `<section class="screen screen-feedback">
      ${errorBanner(flow)}
      <button data-action="reload-feedback">Load feedback</button>
    </section>`;
  }
  const badge =
    report.provider === "fallback"
      ? `<span class="badge badge-fallback">offline mode</span>`
      : `<span class="badge badge-llm">live feedback</span>`;
  const suggestions = report.sections.learning_suggestions
    .map((s) => `<li>${escapeHtml(s)}</li>`)
    .join("\n");
  return `<section class="screen screen-feedback">
    <h1>Session report ${badge}</h1>
    ${errorBanner(flow)}
    <h2>Mastery analysis</h2>
    <p>${escapeHtml(report.sections.mastery_analysis)}</p>
    <h2>Recommendation evaluation</h2>
    <p>${escapeHtml(report.sections.recommendation_evaluation)}</p>
    <h2>Learning suggestions</h2>
    <ul>${suggestions}</ul>
    <h2>Final mastery</h2>
    ${renderMasteryBars(flow)}
    <button data-action="restart">Start another session</button>
  </section>`;
}

export function render(flow: QuizFlow): string {
  switch (flow.screen) {
    case "start":
      return renderStart(flow);
    case "quiz":
      return renderQuiz(flow);
    case "feedback":
      return renderFeedback(flow);
  }
}
