import { QuizApi } from "./api.js";
import { QuizFlow } from "./flow.js";
import { render } from "./render.js";

declare global {
  interface Window {
    LEARNLOOP_API?: string;
  }
}

const api = new QuizApi(window.LEARNLOOP_API ?? "http://127.0.0.1:8080");
const flow = new QuizFlow(api);
const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

function repaint(): void {
  root!.innerHTML = render(flow);
}

root.addEventListener("submit", (event) => {
  const form = event.target as HTMLFormElement;
  if (form.dataset.action !== "start-form") return;
  event.preventDefault();
  const data = new FormData(form);
  const student = String(data.get("student") ?? "");
  const budget = Number(data.get("budget") ?? 10);
  void flow.start(student, budget).then(repaint);
  repaint();
});

root.addEventListener("click", (event) => {
  const target = (event.target as HTMLElement).closest("[data-action]");
  if (!(target instanceof HTMLElement)) return;
  switch (target.dataset.action) {
    case "answer-correct":
      void flow.answer(1).then(repaint);
      break;
    case "answer-incorrect":
      void flow.answer(0).then(repaint);
      break;
    case "retry-next":
      void flow.fetchNext().then(repaint);
      break;
    case "reload-feedback":
      void flow.reloadFeedback().then(repaint);
      break;
    case "restart":
      flow.reset();
      break;
    case "dismiss-error":
      flow.error = null;
      break;
    default:
      return;
  }
  repaint();
});

repaint();
